"""Unit tests for weight snapshots and adapter dumps"""

import logging

import pytest
import torch

from evolving_solver.engine.adapter_engine import discard, init_adapter
from evolving_solver.engine.snapshot import (
    load_adapter,
    load_snapshot,
    save_adapter,
    save_snapshot,
    weights_checksum,
)
from evolving_solver.errors import SnapshotError
from evolving_solver.models.config import AdapterConfig

# Disable logging during tests
logging.getLogger("evolving_solver.engine.snapshot").setLevel(logging.CRITICAL)


class TestWeights:
    """Test saving and loading base weights"""

    def test_round_trip(self, tiny_net, tmp_path):
        """Loaded weights equal the saved ones at float32 precision and keep the checksum"""
        path = tmp_path / "base.snapshot"
        checksum = save_snapshot(path, tiny_net, {"note": "tiny"})
        net, header = load_snapshot(path)

        assert header["checksum"] == checksum == weights_checksum(tiny_net)
        assert header["metadata"] == {"note": "tiny"}
        assert net.config == tiny_net.config
        assert net.dtype == torch.float64
        assert weights_checksum(net) == checksum
        for (name, a), (_, b) in zip(
            sorted(tiny_net.state_dict().items()), sorted(net.state_dict().items()), strict=True
        ):
            assert torch.equal(a.float(), b.float()), name

    def test_loaded_net_is_frozen(self, tiny_net, tmp_path):
        """A loaded network never requires gradients"""
        path = tmp_path / "base.snapshot"
        save_snapshot(path, tiny_net)
        net, _ = load_snapshot(path)
        assert not any(p.requires_grad for p in net.parameters())
        assert not net.training

    def test_expected_checksum(self, tiny_net, tmp_path):
        """A matching prefix loads; anything else is refused"""
        path = tmp_path / "base.snapshot"
        checksum = save_snapshot(path, tiny_net)
        load_snapshot(path, expected_checksum=checksum[:12])
        with pytest.raises(SnapshotError):
            load_snapshot(path, expected_checksum="0" * 64)

    def test_corrupt_payload(self, tiny_net, tmp_path):
        """A flipped payload byte fails the checksum"""
        path = tmp_path / "base.snapshot"
        save_snapshot(path, tiny_net)
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(SnapshotError):
            load_snapshot(path)

    @pytest.mark.parametrize("content", [b"", b"\x01\x02", b"\x10\x00\x00\x00\x00\x00\x00\x00not json"])
    def test_truncated_or_garbage(self, tmp_path, content):
        """Short files and unreadable headers raise SnapshotError"""
        path = tmp_path / "bad.snapshot"
        path.write_bytes(content)
        with pytest.raises(SnapshotError):
            load_snapshot(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(SnapshotError):
            load_snapshot(tmp_path / "absent.snapshot")

    def test_adapter_file_is_not_a_snapshot(self, tiny_net, tmp_path):
        """The format tag keeps adapter dumps and weight snapshots apart"""
        adapter = init_adapter(tiny_net, AdapterConfig(), rng_seed=0)
        try:
            save_adapter(tmp_path / "a.adapter", adapter)
        finally:
            discard(adapter)
        with pytest.raises(SnapshotError):
            load_snapshot(tmp_path / "a.adapter")


class TestAdapterDump:
    """Test adapter dumps"""

    def test_round_trip(self, tiny_net, tmp_path):
        """Factors, rank, alpha and step counter survive a dump"""
        adapter = init_adapter(tiny_net, AdapterConfig(rank=4, alpha=8.0), rng_seed=3)
        adapter.step_counter = 6
        with torch.no_grad():
            for b in adapter.B.values():
                b.fill_(0.25)
        path = tmp_path / "x.adapter"
        try:
            save_adapter(path, adapter, {"task_id": "add"})
            loaded = load_adapter(path)
            try:
                assert loaded.names == adapter.names
                assert (loaded.rank, loaded.alpha, loaded.step_counter) == (4, 8.0, 6)
                for (name, a), (_, b) in zip(adapter.named_tensors(), loaded.named_tensors(), strict=True):
                    assert torch.equal(a.detach().float(), b.float()), name
            finally:
                discard(loaded)
        finally:
            discard(adapter)

    def test_snapshot_is_not_an_adapter(self, tiny_net, tmp_path):
        path = tmp_path / "base.snapshot"
        save_snapshot(path, tiny_net)
        with pytest.raises(SnapshotError):
            load_adapter(path)
