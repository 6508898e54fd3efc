"""Bi-layer KV cache inference engine at toy scale."""
