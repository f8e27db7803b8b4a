"""Multi-agent trajectory prediction with temporally smooth attention."""

__version__ = "0.1.0"
