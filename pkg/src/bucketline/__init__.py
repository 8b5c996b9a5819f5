"""Bucket-brigade sensor network over a shared cable: codec, modem, channel,
protocol state machines, a discrete-event kernel and closed-form analytics."""
from . import analytics, channel, framecodec, modem, protocol, simkernel

__version__ = "0.1.0"

__all__ = ["analytics", "channel", "framecodec", "modem", "protocol", "simkernel", "__version__"]
