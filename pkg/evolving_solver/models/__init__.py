"""
Pydantic models for persisted and exchanged records.

Models are organized by concern in submodules:
- base: canonical JSON / fingerprint base class
- dsl: programs, tasks, reward reports
- config: module and experiment configuration
- reports: budget ledger, solve reports, internalization diagnostics, suite summaries

Import specific models directly: `from evolving_solver.models.dsl import TaskInstance`
"""

from .base import CanonicalModel, canonical_dumps

__all__ = [
    "CanonicalModel",
    "canonical_dumps",
]
