"""Adapter blocks with temporal masking for frozen trimodal encoders, on a numpy autodiff core."""

__version__ = "0.1.0"
