"""Gated audio-visual fusion retrieval."""
