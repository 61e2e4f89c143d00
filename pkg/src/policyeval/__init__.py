"""Policy-text tagging and honest-forest treatment-effect estimation."""

__version__ = "0.1.0"
