"""Energy-aware race strategy for electric endurance cars with competitor interactions."""

__version__ = "0.1.0"
