"""Evidence-seeking diagnostic agent on a synthetic imaging environment."""

__version__ = "0.1.0"
