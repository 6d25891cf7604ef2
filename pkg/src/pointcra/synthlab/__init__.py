"""Synthetic scenes, the desk-scale network, training and analysis drivers."""
