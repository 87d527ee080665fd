"""Desk-scale hierarchical pose regression and diffusion trajectory prior."""

__version__ = "0.1.0"
