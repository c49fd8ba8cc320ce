"""Two-state power model for estimating a run's energy footprint.

Each node draws a baseline idle power for its whole lifetime and an extra
active increment while busy (executing steps or paused on a checkpoint):

    energy_j = p_idle_w * total_s + (p_active_w - p_idle_w) * busy_s

Defaults approximate a small single-board edge node. The absolute numbers
are not calibrated against hardware; the model's value is comparative
(longer completions and busier nodes cost monotonically more energy).
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EnergyModel:
    p_idle_w: float = 2.5
    p_active_w: float = 6.0

    def __post_init__(self) -> None:
        if self.p_idle_w < 0 or self.p_active_w < self.p_idle_w:
            raise ValueError("need 0 <= p_idle_w <= p_active_w")

    def node_energy_j(self, total_s: float, busy_s: float) -> float:
        if busy_s > total_s + 1e-9:
            raise ValueError(f"busy time {busy_s} exceeds lifetime {total_s}")
        return self.p_idle_w * total_s + (self.p_active_w - self.p_idle_w) * busy_s

    def fleet_energy_j(self, total_s: float, busy_by_node: dict[str, float]) -> float:
        return sum(
            self.node_energy_j(total_s, busy) for busy in busy_by_node.values()
        )
