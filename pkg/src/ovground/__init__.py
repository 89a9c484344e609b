"""Desk-scale open-vocabulary temporal grounding on synthetic video.

A from-scratch research stack: taped reverse-mode autograd over float64
numpy arrays, a hierarchical text encoder with multi-depth taps, a
parameter-free semantic gate over video features, masked-query consistency
training, span decoding and retrieval metrics, plus generators for planted
concept worlds with held-out vocabulary.
"""

from ._malloc import keep_large_blocks

keep_large_blocks()

__version__ = "0.1.0"
