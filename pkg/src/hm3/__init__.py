"""Heterogeneous multi-class model merging (HM3) for small text classifiers."""

__version__ = "0.1.0"
