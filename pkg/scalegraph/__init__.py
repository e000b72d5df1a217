"""
scalegraph - few-shot slide classification with multi-scale patch/text graphs.

This package provides:
- Text-guided filtering of patch/text pairs at two magnifications
- A hierarchical heterogeneous graph over patches and prompts
- Relation-aware message passing with scale embeddings
- Top-k patch/text logits and a hierarchical text contrastive loss
- Hit-ratio and interpretability tools, synthetic data and a few-shot harness

Main entry point: python -m scalegraph
"""

__version__ = "0.1.0"
