"""Approximate message passing for ridge-regularized multinomial logistic regression."""
__version__ = "0.1.0"
