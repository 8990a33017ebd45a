"""Long-range random-walk embeddings injected into a transformer for brain-graph classification."""

__version__ = "0.1.0"
