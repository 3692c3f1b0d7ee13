"""charon-extractor: PyTorch block capture into charon-ir/1 files."""

__version__ = "0.1.0"
