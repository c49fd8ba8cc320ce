"""Message broker: in-memory core with totally ordered exchanges, TCP front end."""

from offq.broker.core import (
    Broker,
    BrokerError,
    Delivery,
    DeclareConflict,
    NotFound,
    topic_match,
)

__all__ = [
    "Broker",
    "BrokerError",
    "Delivery",
    "DeclareConflict",
    "NotFound",
    "topic_match",
]
