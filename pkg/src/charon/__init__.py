"""charon: operator-level performance simulation for distributed LLM
training and inference."""

__version__ = "0.1.0"
