"""Continual Gaussian-splatting scene updates."""
