"""Desk-scale two-tower vision-language pretraining.

Image-text contrastive alignment paired with local-to-global
self-distillation from an EMA teacher, plus the evaluation suite
(zero-shot classification, retrieval, few-shot probing, zero-shot
segmentation) needed to study the objective on synthetic data.
"""

__version__ = "0.1.0"
