"""Toolkit for training and evaluating backward-compatible embedding models.

A learned projection maps a new embedding model's outputs into an old
model's gallery space so the gallery never has to be re-embedded. The
package covers text-only pretraining of the projection, cross-modal
fine-tuning with low-rank adapters, direct-contrastive baselines, and
retrieval-based compatibility evaluation.
"""

__version__ = "0.1.0"
