"""Learning under privileged information via heteroscedastic dropout."""

__version__ = "0.1.0"
