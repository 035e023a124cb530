"""proofforge: verification-guided synthetic data and evaluation for proof-oriented code."""

__version__ = "0.1.0"
