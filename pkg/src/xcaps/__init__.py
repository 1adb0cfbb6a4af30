"""Explainable capsule network for attribute-grounded nodule scoring, on a numpy autodiff core."""

__version__ = "0.1.0"
