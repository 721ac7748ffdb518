"""Near-far matched instrumental-variable analysis of bail and conviction."""

__version__ = "0.1.0"
