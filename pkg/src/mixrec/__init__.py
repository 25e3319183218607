"""Mixer-MLP sequential recommender with automated short-term window search."""

from . import cli, data, evaluate, model, numkit, search, train

__version__ = "0.1.0"

__all__ = ["cli", "data", "evaluate", "model", "numkit", "search", "train",
           "__version__"]
