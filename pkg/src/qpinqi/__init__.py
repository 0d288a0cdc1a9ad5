"""Physics-informed unrolled reconstruction of quantitative MR parameter maps."""

__version__ = "0.1.0"
