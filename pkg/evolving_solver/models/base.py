"""
Base models for everything the solver persists or exchanges.

Every record that is written to disk (task files, reports, summaries, configs)
inherits from CanonicalModel so it has one canonical byte representation.
Byte equality of that representation is what replay and the determinism
checks compare.
"""

import hashlib
import json
from typing import Any

from pydantic import BaseModel, ConfigDict


def canonical_dumps(data: Any) -> str:
    """Serialize plain JSON data with sorted keys and no insignificant whitespace."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


class CanonicalModel(BaseModel):
    """Base model with a canonical JSON form and a short content fingerprint"""

    model_config = ConfigDict(extra="forbid")

    def canonical_json(self, **dump_kwargs: Any) -> str:
        """Canonical JSON string (sorted keys, compact separators)."""
        return canonical_dumps(self.model_dump(mode="json", **dump_kwargs))

    def fingerprint(self, length: int = 16) -> str:
        """Hex digest of the canonical JSON, truncated to `length` characters."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:length]
