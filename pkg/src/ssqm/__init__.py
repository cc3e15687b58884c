"""Numerical tools for learning unitary and Kraus maps from quadratic fidelity forms."""
