"""Physics-informed surrogate modelling and state estimation for gravity settlers."""

__version__ = "0.1.0"
