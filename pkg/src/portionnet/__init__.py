"""Cross-modal distillation of point-cloud geometry into an RGB-only food portion estimator."""

__version__ = "0.1.0"
