"""Multi-modal adapter fine-tuning on a frozen slide encoder.

A frozen transformer slide encoder is augmented with a cross-attention
adapter that fuses transcriptomics tokens and learnable task prompts,
trained by aligning fused embeddings with projected text-label embeddings
under a single KL objective. Ships with the downstream evaluation stack
(linear probing, survival analysis, attribution) and a synthetic cohort
harness.
"""

__version__ = "0.1.0"
