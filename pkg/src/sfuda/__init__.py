"""Feature-space toolkit and benchmark harness for source-free unsupervised
domain adaptation on frozen-backbone embeddings."""

__version__ = "0.1.0"
