"""Low-light pose data synthesis and gated pose decoding."""
__version__ = "0.1.0"
