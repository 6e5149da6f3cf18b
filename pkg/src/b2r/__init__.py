"""Boundary-to-region offline safe RL."""
