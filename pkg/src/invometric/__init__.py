"""Compact involution + convolution embedding models for similarity search."""
