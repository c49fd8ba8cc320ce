"""Randomized publish-storm harness shared by broker tests and the acceptance gate."""

from __future__ import annotations

import numpy as np

from offq.broker import Broker
from offq.protocol import make_envelope

KEY_POOL = [
    "job.run.1",
    "job.run.2",
    "job.done",
    "alpha",
    "beta.gamma",
    "beta.gamma.delta",
    "worker.7.heartbeat",
]

PATTERN_POOL = [
    "job.*",
    "job.#",
    "job.run.#",
    "#",
    "alpha",
    "beta.*",
    "*.gamma",
    "worker.#",
]


def run_order_storm(seed: int, publishes: int = 200) -> dict[str, list[tuple[str, int]]]:
    """Blast randomized publishes at topic+fanout exchanges with two queues each.

    Consumption is interleaved at random so deliveries and acks shuffle with
    publishes. Returns, per queue, the (exchange, seq) pairs in the order the
    queue's consumer observed them.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    broker = Broker()
    broker.declare_exchange("xt", "topic")
    broker.declare_exchange("xf", "fanout")

    queues = {"qa": "xt", "qb": "xt", "qc": "xf", "qd": "xf"}
    for name, exchange in queues.items():
        broker.declare_queue(name)
        if exchange == "xt":
            count = int(rng.integers(1, 4))
            picks = rng.choice(len(PATTERN_POOL), size=count, replace=False)
            for idx in picks:
                broker.bind(name, "xt", PATTERN_POOL[idx])
        else:
            broker.bind(name, "xf", "")
    consumer_of = {}
    for name in queues:
        consumer_of[broker.consume(name, owner=f"owner-{name}")] = name

    observed: dict[str, list[tuple[str, int]]] = {name: [] for name in queues}

    def drain() -> None:
        # Ack everything currently assigned; acking frees the consumer, so
        # keep collecting until quiescent.
        while True:
            batch = broker.collect_ready()
            if not batch:
                return
            for delivery in batch:
                observed[delivery.queue].append((delivery.exchange, delivery.exchange_seq))
                broker.ack(delivery.tag)

    for _ in range(publishes):
        exchange = "xt" if rng.random() < 0.6 else "xf"
        key = KEY_POOL[int(rng.integers(0, len(KEY_POOL)))]
        broker.publish(exchange, key, make_envelope("heartbeat", "storm", {"k": key}))
        if rng.random() < 0.5:
            drain()
    drain()
    return observed


def common_order_consistent(observed: dict[str, list[tuple[str, int]]]) -> bool:
    """True when every queue pair sees shared messages in the same order."""
    names = list(observed)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = observed[names[i]], observed[names[j]]
            shared = set(a) & set(b)
            if [m for m in a if m in shared] != [m for m in b if m in shared]:
                return False
    return True
