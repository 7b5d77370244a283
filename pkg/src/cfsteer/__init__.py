"""Causally steered counterfactual explanations on a synthetic spurious-correlation benchmark."""

__version__ = "0.1.0"
