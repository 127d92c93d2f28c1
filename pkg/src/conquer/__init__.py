"""Two-stage video corpus moment retrieval with query-dependent fusion and query-aware ranking."""

__version__ = "0.1.0"
