"""OOD detection with training-time virtual outliers, post-hoc scores and evaluation."""

__version__ = "0.1.0"
