"""Tree partitions, split-nets, anisotropic approximation and Bayesian forests on the unit cube."""

__version__ = "0.1.0"
