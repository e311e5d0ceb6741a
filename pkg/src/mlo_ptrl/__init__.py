"""Channel selection for Wi-Fi 7 multi-link operation with parallel-transfer VDN."""

__version__ = "0.1.0"
