"""Semi-grant-free NOMA uplink simulator with multi-agent deep Q-learning power control."""

__version__ = "0.1.0"
