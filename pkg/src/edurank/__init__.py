"""Latent-query retrieval for multi-document summarization inputs."""
__version__ = "0.1.0"
