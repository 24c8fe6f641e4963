"""Two-stage logistic-normal small area estimation."""
__version__ = "0.1.0"
