"""Joint identity/attribute recognition and large-gallery re-ID evaluation."""

__version__ = "0.1.0"
