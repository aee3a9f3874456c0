"""Evidential deep learning for three-class renal tumor subtyping from CT volumes."""

__version__ = "0.1.0"
