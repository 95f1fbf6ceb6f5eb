"""
Weight and adapter container files.

Layout: 8-byte little-endian header length, a UTF-8 JSON header, then every
tensor as little-endian float32 in header order. The header records the
vocabulary, the network config, tensor names/shapes/offsets and a sha256
checksum of the float32 payload.
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import Tensor

from ..errors import SnapshotError
from ..models.config import NetConfig
from .adapter_engine import AdapterParams
from .policy_net import PolicyNet
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT = "evolving-solver/weights"
ADAPTER_FORMAT = "evolving-solver/adapter"
FORMAT_VERSION = 1


def _payload(named: list[tuple[str, Tensor]]) -> tuple[list[dict[str, Any]], bytes]:
    entries = []
    chunks = []
    offset = 0
    for name, t in named:
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def weights_checksum(net: PolicyNet) -> str:
    """sha256 over the float32 little-endian bytes of every parameter, in name order"""
    _, payload = _payload(sorted(net.named_parameters()))
    return hashlib.sha256(payload).hexdigest()


def _write(path: Path, header: dict[str, Any], payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as f:
        f.write(struct.pack("<Q", len(raw_header)))
        f.write(raw_header)
        f.write(payload)


def _read(path: Path) -> tuple[dict[str, Any], bytes]:
    try:
        data = path.read_bytes()
    except OSError as e:
        raise SnapshotError(f"cannot read snapshot {path}: {e}") from e
    if len(data) < 8:
        raise SnapshotError(f"{path} is truncated")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SnapshotError(f"{path} has a corrupt header") from e
    payload = data[8 + n :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("checksum"):
        raise SnapshotError(f"{path}: payload checksum {digest[:16]} does not match header")
    return header, payload


def _tensors(header: dict[str, Any], payload: bytes, dtype: torch.dtype) -> dict[str, Tensor]:
    out = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        arr = np.frombuffer(payload[start : start + entry["nbytes"]], dtype="<f4")
        out[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy()).to(dtype)
    return out


def save_snapshot(path: Path, net: PolicyNet, metadata: dict[str, Any] | None = None) -> str:
    """Write the base weights; returns the checksum."""
    entries, payload = _payload(sorted(net.named_parameters()))
    checksum = hashlib.sha256(payload).hexdigest()
    header = {
        "format": WEIGHTS_FORMAT,
        "version": FORMAT_VERSION,
        "vocab": net.vocab.header(),
        "config": net.config.model_dump(mode="json"),
        "tensors": entries,
        "checksum": checksum,
        "metadata": metadata or {},
    }
    _write(path, header, payload)
    logger.info(f"Wrote weight snapshot {path} (checksum {checksum[:16]})")
    return checksum


def load_snapshot(
    path: Path, dtype: torch.dtype = torch.float64, expected_checksum: str | None = None
) -> tuple[PolicyNet, dict[str, Any]]:
    """
    Load base weights as a frozen network. Returns (net, header).

    Raises:
        SnapshotError: corrupt container, wrong format, or checksum other than
            `expected_checksum` (prefix match)
    """
    header, payload = _read(path)
    if header.get("format") != WEIGHTS_FORMAT:
        raise SnapshotError(f"{path} is not a weight snapshot (format={header.get('format')})")
    if expected_checksum and not header["checksum"].startswith(expected_checksum):
        raise SnapshotError(
            f"{path}: checksum {header['checksum'][:16]} does not match expected {expected_checksum[:16]}"
        )
    net = PolicyNet(Vocabulary(header["vocab"]), NetConfig.model_validate(header["config"]))
    tensors = _tensors(header, payload, torch.float32)
    try:
        net.load_state_dict(tensors, strict=True)
    except RuntimeError as e:
        raise SnapshotError(f"{path}: tensors do not match the network config: {e}") from e
    net = net.to(dtype).freeze()
    logger.info(f"Loaded weight snapshot {path} (checksum {header['checksum'][:16]})")
    return net, header


def save_adapter(path: Path, adapter: AdapterParams, metadata: dict[str, Any] | None = None) -> str:
    entries, payload = _payload(list(adapter.named_tensors()))
    checksum = hashlib.sha256(payload).hexdigest()
    header = {
        "format": ADAPTER_FORMAT,
        "version": FORMAT_VERSION,
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "step_counter": adapter.step_counter,
        "tensors": entries,
        "checksum": checksum,
        "metadata": metadata or {},
    }
    _write(path, header, payload)
    return checksum


def load_adapter(path: Path, dtype: torch.dtype = torch.float64) -> AdapterParams:
    header, payload = _read(path)
    if header.get("format") != ADAPTER_FORMAT:
        raise SnapshotError(f"{path} is not an adapter dump")
    tensors = _tensors(header, payload, dtype)
    A = {n[: -len(".A")]: t for n, t in tensors.items() if n.endswith(".A")}
    B = {n[: -len(".B")]: t for n, t in tensors.items() if n.endswith(".B")}
    adapter = AdapterParams(A, B, header["rank"], header["alpha"])
    adapter.step_counter = header["step_counter"]
    return adapter
