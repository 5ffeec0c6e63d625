"""qkit: int8 quantization toolkit (calibration, integer kernels, PTQ workflow, QAT)."""

__version__ = "0.1.0"
