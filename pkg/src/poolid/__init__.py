"""System identification toolkit for swimming-pool thermal dynamics."""

__version__ = "0.1.0"
