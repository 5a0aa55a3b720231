"""Coarse-to-fine image parsing with stacked prediction heads."""
