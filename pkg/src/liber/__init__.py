"""Lifelong user-behavior modeling with partitioned LLM interest knowledge."""

__version__ = "0.1.0"
