"""demoforge: filter-and-restore pipeline for noisy imitation-learning demos."""

__version__ = "0.1.0"
