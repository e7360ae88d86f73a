"""finq: hybrid keyword + semantic search over an incrementally indexed corpus.

Offline, documents flow frontier -> extract -> enrich -> index; online,
:func:`finq.retrieval.execute_query` combines BM25 and HNSW results.
"""

from finq.errors import FinqError, ProviderError, ValidationError

__version__ = "0.1.0"

__all__ = ["FinqError", "ProviderError", "ValidationError", "__version__"]
