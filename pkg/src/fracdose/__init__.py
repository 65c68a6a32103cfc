"""Fractional-order phenotypic switching model, dosing controllers and a numpy Double DQN."""

__version__ = "0.1.0"
