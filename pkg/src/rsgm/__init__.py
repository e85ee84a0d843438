"""Riemannian score-based generative sampling on tori and spheres with exact scores."""

__version__ = "0.1.0"
