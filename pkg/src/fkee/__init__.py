"""Feynman-Kac operator expectation estimator."""
