"""Simulated temperature/humidity monitoring station.

Sensor frame codec, emulated device firmware, virtual-pin wire protocol,
telemetry broker with JSONL history and HTTP queries, and evaluation tools.
"""

from .analytics import ClarityLabel, build_report, classify_clarity, percentage_error
from .sensor_codec import EnvironmentProfile, RawFrame, Reading, SensorState, decode_frame, encode_frame
from .wire_protocol import Command, ProtocolMessage, Status, decode_stream, encode_message

__version__ = "0.1.0"

__all__ = [
    "ClarityLabel",
    "Command",
    "EnvironmentProfile",
    "ProtocolMessage",
    "RawFrame",
    "Reading",
    "SensorState",
    "Status",
    "build_report",
    "classify_clarity",
    "decode_frame",
    "decode_stream",
    "encode_frame",
    "encode_message",
    "percentage_error",
]
