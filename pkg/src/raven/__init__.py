"""Retrieval augmentation for vision-language datasets.

Modules: ``embed_store`` (validated embedding stores), ``index`` (exact and
IVF inner-product search), ``retriever`` (dedup, caption mapping, top-1),
``augment`` (ablation-mode dataset emission), ``metrics`` (BLEU@4, CIDEr-D,
VQA accuracy) and ``decode`` (trie-constrained beam search).
"""

__version__ = "0.1.0"
