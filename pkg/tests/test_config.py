"""Tests for configuration models, fingerprints and YAML config files"""

import logging
from pathlib import Path

import pytest
from pydantic import ValidationError

from evolving_solver.harness.config_file import dump_config, load_config
from evolving_solver.models.config import (
    AdapterConfig,
    EvolutionConfig,
    ExperimentConfig,
    Method,
    NetConfig,
    PretrainConfig,
    SearchConfig,
    validate_difficulty_mix,
)
from evolving_solver.models.reports import SolveReport

# Disable logging during tests
logging.getLogger("evolving_solver.harness.config_file").setLevel(logging.CRITICAL)


class TestDefaults:
    """Test the reference hyperparameters"""

    def test_search_and_grpo_defaults(self):
        config = EvolutionConfig()
        assert config.search.c_puct == 1.414
        assert (config.search.k, config.search.max_depth, config.search.max_simulations) == (3, 8, 20)
        assert config.search.temperature == 0.7
        assert config.search.node_budget == 60
        assert (config.grpo.epsilon, config.grpo.beta, config.grpo.fixed_kl) == (0.3, 0.02, 0.005)
        assert (config.grpo.epochs, config.grpo.ref_sync_every, config.grpo.adv_clip) == (3, 10, 5.0)
        assert (config.adapter.rank, config.adapter.lr) == (8, 1e-4)
        assert config.adaptation_enabled

    def test_outer_step_limit(self):
        """Outer steps are capped by the simulation budget"""
        assert EvolutionConfig().outer_step_limit == 20
        assert EvolutionConfig(max_outer_steps=5).outer_step_limit == 5
        assert EvolutionConfig(max_outer_steps=50).outer_step_limit == 20


class TestValidation:
    """Test field constraints"""

    @pytest.mark.parametrize(
        ("model", "kwargs"),
        [
            (SearchConfig, {"k": 0}),
            (SearchConfig, {"temperature": 0.0}),
            (SearchConfig, {"c_puct": -1.0}),
            (AdapterConfig, {"rank": 0}),
            (AdapterConfig, {"targets": ("q", "x")}),
            (AdapterConfig, {"targets": ()}),
            (NetConfig, {"d_model": 30, "n_heads": 4}),
            (NetConfig, {"context": 16}),
            (ExperimentConfig, {"seeds": [0, 0]}),
            (ExperimentConfig, {"seeds": []}),
            (ExperimentConfig, {"best_of_n": 0}),
            (PretrainConfig, {"difficulty_mix": {7: 1.0}}),
        ],
    )
    def test_rejected(self, model, kwargs):
        with pytest.raises(ValidationError):
            model(**kwargs)

    def test_unknown_fields_rejected(self):
        """Typos in config files are errors, not silently ignored"""
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate({"evolution": {"serach": {}}})

    def test_mix_normalized(self):
        assert validate_difficulty_mix({2: 1.0, 1: 3.0}) == {1: 0.75, 2: 0.25}


class TestFingerprint:
    """Test canonical fingerprints"""

    def test_stable(self):
        assert ExperimentConfig().fingerprint() == ExperimentConfig().fingerprint()

    @pytest.mark.parametrize(
        "update",
        [
            {"seeds": [1]},
            {"best_of_n": 5},
            {"method": Method.GREEDY},
            {"evolution": EvolutionConfig(search=SearchConfig(k=2))},
            {"evolution": EvolutionConfig(grpo={"beta": 0.2})},
            {"evolution": EvolutionConfig(adapter=AdapterConfig(rank=4))},
            {"net": NetConfig(d_model=32)},
        ],
    )
    def test_any_field_changes_fingerprint(self, update):
        base = ExperimentConfig()
        assert base.model_copy(update=update).fingerprint() != base.fingerprint()

    def test_for_method(self):
        """Adaptation follows the method; the fingerprint follows both"""
        config = ExperimentConfig()
        search_only = config.for_method(Method.SEARCH_ONLY)
        assert search_only.method is Method.SEARCH_ONLY
        assert not search_only.evolution.adaptation_enabled
        pot = search_only.for_method(Method.POT)
        assert pot.evolution.adaptation_enabled
        assert pot.fingerprint() == config.fingerprint()

    def test_budget_parity(self):
        """Strict node parity raises best-of-n to M * k"""
        config = ExperimentConfig(best_of_n=20, budget_parity=True)
        assert config.effective_best_of_n == 60
        assert ExperimentConfig(best_of_n=20).effective_best_of_n == 20


class TestConfigFile:
    """Test YAML config files"""

    def test_round_trip(self, tmp_path):
        """A dumped config loads back to the same fingerprint"""
        config = ExperimentConfig(seeds=[0, 1, 2], evolution=EvolutionConfig(search=SearchConfig(k=2)))
        dump_config(config, tmp_path / "config.yaml")
        assert load_config(tmp_path / "config.yaml").fingerprint() == config.fingerprint()

    def test_sorted_keys(self, tmp_path):
        dump_config(ExperimentConfig(), tmp_path / "config.yaml")
        top_level = [line.split(":")[0] for line in (tmp_path / "config.yaml").read_text().splitlines() if line[:1].isalpha()]
        assert top_level == sorted(top_level)

    def test_partial_file_uses_defaults(self, tmp_path):
        path = tmp_path / "partial.yaml"
        path.write_text("evolution:\n  search:\n    k: 5\nseeds: [3, 4]\n")
        config = load_config(path)
        assert config.evolution.search.k == 5
        assert config.evolution.search.max_depth == 8
        assert config.seeds == [3, 4]

    def test_none_and_empty(self, tmp_path):
        assert load_config(None) == ExperimentConfig()
        (tmp_path / "empty.yaml").write_text("")
        assert load_config(tmp_path / "empty.yaml") == ExperimentConfig()

    @pytest.mark.parametrize("content", ["- just\n- a list\n", "key: [unclosed\n"])
    def test_bad_documents(self, tmp_path, content):
        path = tmp_path / "bad.yaml"
        path.write_text(content)
        with pytest.raises(ValueError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValueError):
            load_config(tmp_path / "absent.yaml")

    def test_shipped_configs_load(self):
        """Every config under configs/ is valid"""
        configs = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
        assert configs
        for path in configs:
            load_config(path)


class TestReportModel:
    def test_solved_requires_full_reward(self):
        """A report cannot claim a solve with partial reward"""
        with pytest.raises(ValidationError):
            SolveReport(
                task_id="t",
                task={},
                task_fingerprint="x",
                method=Method.GREEDY,
                seed=0,
                config_fingerprint="y",
                config={},
                snapshot_checksum="z",
                solved=True,
                reward=0.5,
                final_program="DUP",
            )
