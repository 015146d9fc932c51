"""Speech-conditioned facial-motion infilling with flow matching."""

__version__ = "0.1.0"
