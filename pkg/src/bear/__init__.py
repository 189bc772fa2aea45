"""BGP event analysis and reporting."""

__version__ = "0.1.0"
