"""Time-independent video recognition with multi-head attention pooling over frames."""

__version__ = "0.1.0"
