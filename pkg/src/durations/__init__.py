"""Duration-response modelling for trials that randomise treatment length."""

__version__ = "0.1.0"
