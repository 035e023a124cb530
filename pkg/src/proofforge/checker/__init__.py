"""Execution-based validation: backends, verdicts, and error classification."""

from .backends import (
    CheckerBackend,
    CheckerConfig,
    CommandBackend,
    MiniSpecBackend,
    RawOutcome,
    assemble_program,
    batch_check,
    candidate_digest,
    check,
    verify_minispec,
)
from .minispec import MiniSpecError, check_source
from .taxonomy import Taxonomy, TaxonomyRule, classify_error, default_taxonomy, load_taxonomy
from .verdicts import ErrorClass, Status, Verdict

__all__ = [
    "CheckerBackend",
    "CheckerConfig",
    "CommandBackend",
    "ErrorClass",
    "MiniSpecBackend",
    "MiniSpecError",
    "RawOutcome",
    "Status",
    "Taxonomy",
    "TaxonomyRule",
    "Verdict",
    "assemble_program",
    "batch_check",
    "candidate_digest",
    "check",
    "check_source",
    "classify_error",
    "default_taxonomy",
    "load_taxonomy",
    "verify_minispec",
]
