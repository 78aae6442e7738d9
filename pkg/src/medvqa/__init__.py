"""Training-free multi-agent reasoning pipeline for medical VQA."""

__version__ = "0.1.0"
