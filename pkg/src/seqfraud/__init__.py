"""Fraud detection on categorical event sequences with LSTMs and Markov transition fields."""

__version__ = "0.1.0"
