"""Coherent two-mode control of an optically levitated nanoparticle."""

__version__ = "0.1.0"
