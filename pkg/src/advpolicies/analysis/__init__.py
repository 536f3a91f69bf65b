"""Activation capture, Gaussian-mixture density models and exact t-SNE."""
