"""skillrank: two-stage course recommendation with a quantized re-ranker."""

__version__ = "0.1.0"
