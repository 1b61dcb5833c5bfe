"""Numerical, model and experiment helpers for golden-subspace adaptation."""
