"""Cross-modal transformers for sleep stage classification, on a small numpy autograd engine."""

__version__ = "0.1.0"
