"""Test-time adaptive detection with self-training and feature-alignment regularization."""
