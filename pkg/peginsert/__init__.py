"""peginsert - Peg-in-hole insertion learning with a dynamic safety lock."""

__version__ = "0.1.0"
