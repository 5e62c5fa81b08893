"""Desk-scale lab for training and evaluating late-interaction retrievers."""

__version__ = "0.1.0"
