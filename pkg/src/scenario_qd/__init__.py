"""Quality-diversity search for failure scenarios."""

__version__ = "0.1.0"
