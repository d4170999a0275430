"""Model-based offline policy search with dynamics ensembles and a support penalty."""

__version__ = "0.1.0"
