"""Neural auction design under an explicit regret budget."""

__version__ = "0.1.0"
