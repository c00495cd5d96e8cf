"""Desk-scale LoRA / MultiLoRA laboratory."""

__version__ = "0.1.0"
