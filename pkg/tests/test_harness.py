"""Experiment orchestration, ablation wiring, timing, and export tests."""

import dataclasses
import json

import numpy as np
import pytest

from activepool.acquisition import wasserstein_select, labeled_latent_stats
from activepool.errors import ConfigurationError
from activepool.harness import (
    ArchConfig,
    CurvePoint,
    ExperimentConfig,
    _select,
    _train_round_models,
    budget_size,
    config_from_dict,
    config_to_dict,
    export_results,
    load_config,
    parse_results,
    repetition_seeds,
    run_ablation,
    run_experiment,
    run_repetition,
    time_sampling,
    validate_schedule,
)
from activepool.models import parameter_digest
from activepool.pool import init_pools, make_gaussian_mixture
from activepool.trainer import TrainConfig


def tiny_cfg(**overrides):
    base = dict(
        dataset={"kind": "synthetic", "classes": 4, "dim": 6, "per_class": 50,
                 "seed": 2, "test_count": 60},
        strategy="vaal",
        initial_fraction=0.2,
        budget_fraction=0.2,
        target_fractions=(0.2, 0.4),
        train=TrainConfig(epochs=2, batch_size=32),
        repetitions=2,
        arch=ArchConfig(latent_dim=3, vae_hidden=8, disc_hidden=8, task_hidden=(8,)),
        seed=7,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def dataset():
    return make_gaussian_mixture(classes=4, dim=6, per_class=50, seed=2, test_count=60)


class TestConfigValidation:
    def test_fractions_must_ascend(self):
        with pytest.raises(ConfigurationError):
            tiny_cfg(target_fractions=(0.4, 0.2))

    def test_fraction_below_initial_rejected(self):
        with pytest.raises(ConfigurationError):
            tiny_cfg(target_fractions=(0.1, 0.4))

    def test_unreachable_fraction_rejected(self, dataset):
        cfg = tiny_cfg(target_fractions=(0.2, 0.3))  # gap of 20 labels, budget 40
        with pytest.raises(ConfigurationError):
            validate_schedule(cfg, dataset)

    def test_unknown_ablation_rejected(self):
        with pytest.raises(ConfigurationError):
            tiny_cfg(ablation=("drop_everything",))

    def test_conflicting_ablations_rejected_at_run(self, dataset):
        cfg = tiny_cfg(ablation=("no_vae", "frozen_vae"))
        with pytest.raises(ConfigurationError):
            run_repetition(cfg, dataset, rep_seed=0)

    def test_config_round_trip(self):
        cfg = tiny_cfg(ablation=("no_vae",))
        assert config_from_dict(config_to_dict(cfg)) == cfg

    def test_load_config_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "absent.json")

    def test_load_config_bad_key(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"strategy": "vaal", "no_such_key": 1}))
        with pytest.raises(ConfigurationError):
            load_config(path)


class TestRunExperiment:
    def test_curve_matches_targets(self, dataset):
        cfg = tiny_cfg()
        curves = run_experiment(cfg, dataset)
        assert [p.labeled_fraction for p in curves] == [0.2, 0.4]
        assert all(0.0 <= p.mean_accuracy <= 1.0 for p in curves)
        assert all(p.std_accuracy >= 0.0 for p in curves)

    def test_single_fraction_pure_baseline(self, dataset):
        cfg = tiny_cfg(target_fractions=(0.2,), repetitions=1)
        curves = run_experiment(cfg, dataset)
        assert len(curves) == 1
        assert curves[0].mean_sample_seconds == 0.0  # no acquisition round

    def test_deterministic_repeat(self, dataset):
        cfg = tiny_cfg(repetitions=1)
        first = run_experiment(cfg, dataset)
        second = run_experiment(cfg, dataset)
        # wall time varies; everything else replays bit-exactly
        assert [(p.labeled_fraction, p.mean_accuracy, p.std_accuracy) for p in first] == \
            [(p.labeled_fraction, p.mean_accuracy, p.std_accuracy) for p in second]

    def test_budget_sweep_shares_fraction_grid(self, dataset):
        low = tiny_cfg(budget_fraction=0.1, target_fractions=(0.2, 0.4), repetitions=1,
                       strategy="random")
        high = tiny_cfg(budget_fraction=0.2, target_fractions=(0.2, 0.4), repetitions=1,
                        strategy="random")
        curve_low = run_experiment(low, dataset)
        curve_high = run_experiment(high, dataset)
        assert [p.labeled_fraction for p in curve_low] == [p.labeled_fraction for p in curve_high]

    def test_partial_results_persisted(self, dataset, tmp_path):
        cfg = tiny_cfg(repetitions=2)
        run_experiment(cfg, dataset, out_dir=tmp_path)
        payload = json.loads((tmp_path / "repetitions.json").read_text())
        assert len(payload) == 2
        assert all(len(r["accuracies"]) == 2 for r in payload)

    def test_noisy_oracle_config_runs(self):
        ds = make_gaussian_mixture(classes=4, dim=6, per_class=50, seed=2,
                                   test_count=60, superclasses=2)
        from activepool.pool import OracleConfig

        cfg = tiny_cfg(oracle=OracleConfig(kind="noisy", noise_fraction=0.2, rng_seed=5),
                       repetitions=1)
        curves = run_experiment(cfg, ds)
        assert len(curves) == 2


class TestAblations:
    def test_requires_flag(self, dataset):
        with pytest.raises(ConfigurationError):
            run_ablation(tiny_cfg(), dataset)

    def test_all_variants_produce_curves(self, dataset):
        cfg = tiny_cfg(ablation=("no_vae", "frozen_vae", "no_discriminator"), repetitions=1)
        curves = run_ablation(cfg, dataset)
        assert set(curves) == {"no_vae", "frozen_vae", "no_discriminator"}
        for points in curves.values():
            assert [p.labeled_fraction for p in points] == [0.2, 0.4]

    def test_frozen_vae_never_updates_vae(self, dataset):
        cfg = tiny_cfg(ablation=("frozen_vae",))
        pool = init_pools(dataset, 0.2, seed=0)
        bundle = _train_round_models(cfg, dataset, pool, round_seed=123, ablation="frozen_vae")
        from activepool.models import build_models

        fresh = build_models(dataset.feature_dim, dataset.class_count,
                             latent_dim=cfg.arch.latent_dim, vae_hidden=cfg.arch.vae_hidden,
                             disc_hidden=cfg.arch.disc_hidden, task_hidden=cfg.arch.task_hidden,
                             seed=123)
        assert parameter_digest(bundle.models.vae_params) == parameter_digest(fresh.vae_params)
        # the discriminator did train
        assert parameter_digest(bundle.models.disc_params) != parameter_digest(fresh.disc_params)

    def test_no_vae_discriminator_sees_raw_features(self, dataset):
        cfg = tiny_cfg(ablation=("no_vae",))
        pool = init_pools(dataset, 0.2, seed=0)
        bundle = _train_round_models(cfg, dataset, pool, round_seed=3, ablation="no_vae")
        assert bundle.models.discriminator.input_dim == dataset.feature_dim
        result = _select(cfg, dataset, pool, bundle, 5, acquire_seed=0, ablation="no_vae")
        assert len(result.selected) == 5

    def test_no_discriminator_uses_wasserstein_ranking(self, dataset):
        cfg = tiny_cfg(ablation=("no_discriminator",))
        pool = init_pools(dataset, 0.2, seed=0)
        bundle = _train_round_models(cfg, dataset, pool, round_seed=9,
                                     ablation="no_discriminator")
        got = _select(cfg, dataset, pool, bundle, 5, acquire_seed=0,
                      ablation="no_discriminator")
        stats = labeled_latent_stats(pool, dataset, bundle.models)
        expected = wasserstein_select(pool, dataset, bundle.models, stats, 5)
        assert got.selected == expected.selected


class TestTiming:
    def test_rows_and_determinism(self, dataset):
        cfg = tiny_cfg(repetitions=1)
        rows = time_sampling(cfg, ["vaal", "random", "coreset"], dataset)
        assert [r.strategy for r in rows] == ["vaal", "random", "coreset"]
        assert all(r.seconds >= 0 for r in rows)

    def test_minimum_repeats_enforced(self, dataset):
        with pytest.raises(ConfigurationError):
            time_sampling(tiny_cfg(), ["vaal"], dataset, repeats=2)


class TestExport:
    def test_empty_curves_header_only(self, tmp_path):
        csv_path, _ = export_results([], tmp_path / "empty.csv")
        assert csv_path.read_text() == "fraction,mean,std,time\n"

    def test_seven_fractions_seven_rows(self, tmp_path):
        curves = [CurvePoint(0.1 + 0.05 * i, 0.5, 0.01, 0.2) for i in range(7)]
        csv_path, manifest_path = export_results(curves, tmp_path / "c.csv", cfg=tiny_cfg())
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 8
        manifest = json.loads(manifest_path.read_text())
        assert len(manifest["curves"]) == 7
        assert manifest["build_id"]

    def test_round_trip_equality(self, tmp_path):
        curves = [CurvePoint(0.1, 1 / 3, 0.0123456789012345, 2.5e-4),
                  CurvePoint(0.15, 0.87654321, 0.0, 0.0)]
        csv_path, _ = export_results(curves, tmp_path / "rt.csv")
        assert parse_results(csv_path) == curves

    def test_bit_stable(self, tmp_path):
        cfg = tiny_cfg()
        curves = [CurvePoint(0.1, 0.5, 0.2, 0.001)]
        a, am = export_results(curves, tmp_path / "a.csv", cfg=cfg)
        b, bm = export_results(curves, tmp_path / "b.csv", cfg=cfg)
        assert a.read_bytes() == b.read_bytes()
        assert am.read_bytes() == bm.read_bytes()

    def test_unwritable_path_raises_ioerror(self, tmp_path):
        with pytest.raises(IOError):
            export_results([], tmp_path / "no" / "such" / "dir" / "x.csv")

    def test_repetition_seeds_stable(self):
        cfg = tiny_cfg()
        assert repetition_seeds(cfg) == repetition_seeds(cfg)
        assert len(repetition_seeds(cfg)) == cfg.repetitions


class TestCli:
    def test_gen_data_and_run(self, tmp_path):
        from activepool.cli import main

        data_path = tmp_path / "toy.alp"
        code = main(["gen-data", "--classes", "4", "--dim", "6", "--per-class", "50",
                     "--seed", "2", "--test-count", "60", "--out", str(data_path)])
        assert code == 0 and data_path.exists()

        cfg = tiny_cfg(dataset={"kind": "file", "path": str(data_path)}, repetitions=1)
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(config_to_dict(cfg)))
        out_dir = tmp_path / "out"
        code = main(["run", "--config", str(cfg_path), "--out-dir", str(out_dir)])
        assert code == 0
        assert (out_dir / "results.csv").exists()
        manifest = json.loads((out_dir / "results.manifest.json").read_text())
        assert len(manifest["curves"]) == 2

        export_path = tmp_path / "re.csv"
        code = main(["export", "--manifest", str(out_dir / "results.manifest.json"),
                     "--out", str(export_path)])
        assert code == 0
        assert export_path.read_text() == (out_dir / "results.csv").read_text()

    def test_bad_config_exits_two(self, tmp_path):
        from activepool.cli import main

        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"strategy": "telepathy"}))
        assert main(["run", "--config", str(cfg_path)]) == 2

    def test_missing_config_exits_two(self, tmp_path):
        from activepool.cli import main

        assert main(["run", "--config", str(tmp_path / "none.json")]) == 2


class TestBudget:
    def test_budget_size_arithmetic(self, dataset):
        assert budget_size(tiny_cfg(), dataset) == round(0.2 * 200)

    def test_fresh_models_each_round(self, dataset):
        """Round model seeds differ, so re-initialization is genuinely fresh."""
        from activepool.rng import spawn_seeds

        rep_seed = 42
        seeds = [spawn_seeds(rep_seed, 1, "round-models", k)[0] for k in range(3)]
        assert len(set(seeds)) == 3
