"""Robust active speaker detection with separator-guided audio features and
frame-weighted separation supervision, sized to train on a CPU."""

__version__ = "0.1.0"
