"""Sketch+text composed fine-grained image retrieval.

A query sketch is inverted into a pseudo-word token inside a frozen
dual-encoder's text space, optionally combined with free text, and ranked
against a precomputed gallery of photo features.
"""

__version__ = "0.1.0"
