"""offq: fault-tolerant computation offloading over a message broker.

Pieces: closed-form checkpoint math (ckptmath), an in-memory/TCP message
broker with totally ordered exchanges (broker), the wire protocol and
connection flows (protocol, flows), replicated orchestrators
(orchestrator), checkpointing workers (worker), a deterministic simulation
lab (simlab), and a command line front end (cli).
"""

__version__ = "0.1.0"
