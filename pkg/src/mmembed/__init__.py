"""Bidirectional multimodal embeddings: denoising pre-training and contrastive fine-tuning at toy scale."""

__version__ = "0.1.0"
