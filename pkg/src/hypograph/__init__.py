"""Knowledge-graph hypothesis exploration toolkit."""

__version__ = "0.1.0"
