"""Deterministic discrete-event simulation of the offloading system."""

from offq.simlab.kernel import SimHost, SimKernel
from offq.simlab.energy import EnergyModel
from offq.simlab.client import ClientProfile, SimClient
from offq.simlab.runner import RunRecord, SimConfig, run_simulation

__all__ = [
    "SimHost",
    "SimKernel",
    "EnergyModel",
    "ClientProfile",
    "SimClient",
    "RunRecord",
    "SimConfig",
    "run_simulation",
]
