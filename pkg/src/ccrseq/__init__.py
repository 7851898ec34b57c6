"""Character-level consistency regularization for semi-supervised text recognition."""

__version__ = "0.1.0"
