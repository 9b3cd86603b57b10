"""Selective generation with an LSTM encoder, coarse-to-fine aligner and LSTM decoder."""

__version__ = "0.1.0"
