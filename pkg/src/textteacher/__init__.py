"""Desk-scale TextTeacher: align a small ViT's embedding with whitened caption
embeddings during training, plus the tooling to measure what that does."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
