"""Lottery-ticket experiments on a small from-scratch transformer encoder."""

__version__ = "0.1.0"
