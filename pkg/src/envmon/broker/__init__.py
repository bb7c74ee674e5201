from .core import Broker, BrokerConfig, DeviceSession, Outcome, PinWrite, handle_message
from .server import BrokerServer, LoopbackHub, LoopbackTransport, QueryServer, split_address
from .store import HistoryEntry, PinRecord, PinStore, history_file, read_history_file

__all__ = [
    "Broker",
    "BrokerConfig",
    "BrokerServer",
    "DeviceSession",
    "HistoryEntry",
    "LoopbackHub",
    "LoopbackTransport",
    "Outcome",
    "PinRecord",
    "PinStore",
    "PinWrite",
    "QueryServer",
    "handle_message",
    "history_file",
    "read_history_file",
    "split_address",
]
