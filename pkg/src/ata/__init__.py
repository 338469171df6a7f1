"""Adversarial testing harness for conversational agents."""

__version__ = "0.1.0"
