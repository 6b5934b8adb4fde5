"""Workbench for studying how paragraph and sequence end markers affect
autoregressive text generation: corpus handling, five marker serialization
schemes, a small from-scratch transformer LM, nucleus sampling, the full
automatic-metric suite, and a blinded pairwise human-evaluation service."""

__version__ = "0.1.0"
