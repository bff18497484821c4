"""Cross-modal attention caption decoder with global and local information distilling."""

__version__ = "0.1.0"
