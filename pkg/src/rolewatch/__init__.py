"""Role-based lateral movement analytics over connection logs."""

__version__ = "0.1.0"
