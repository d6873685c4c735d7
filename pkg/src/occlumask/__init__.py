"""Occlusion-aware landmark classification with patch-dropping vision transformers."""

__version__ = "0.1.0"
