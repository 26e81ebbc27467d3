"""Single-cell clustering with adaptively learned cell graphs."""

__version__ = "0.1.0"
