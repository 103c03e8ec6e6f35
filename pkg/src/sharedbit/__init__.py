"""One-shot weight-sharing mixed-precision quantization at desk scale."""

__version__ = "0.1.0"
