"""Music question answering and captioning toolkit.

Layer-stacked audio features, a gated residual adapter, query injection
into a frozen decoder, instruction-driven QA dataset generation, a
two-stage training harness, and a text-generation evaluation suite.
"""

__version__ = "0.1.0"
