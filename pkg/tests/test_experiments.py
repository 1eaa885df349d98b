# tests/test_experiments.py

import json

import numpy as np
import pandas as pd
import pytest

import argmaxgrad
from src import dvae, experiments
from src.estimators import EstimatorConfig
from src.experiments import (
    ExperimentSpec,
    SpecError,
    apply_overrides,
    config_hash,
    load_specs,
    run,
    validate_spec,
)
from src.tensor_autodiff import NumericFailure


def _doc(directory, **sections):
    doc = {
        "kind": "train",
        "dataset": {"source": "synthetic", "kind": "bars", "train_size": 48, "test_size": 16},
        "model": {"latent": {"k": 8}, "hidden": 8},
        "train": {"epochs": 3, "batch_size": 16, "learning_rate": 0.01, "seed": 1},
        "output": {"directory": str(directory), "wall_clock": False},
    }
    for key, value in sections.items():
        doc[key] = {**doc.get(key, {}), **value} if isinstance(value, dict) else value
    return doc


def _write(tmp_path, doc, name="spec.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


class TestSpecs:
    def test_overrides(self):
        doc = apply_overrides({"train": {"epochs": 3}}, ["train.epochs=5", "model.latent.k=4", "output.directory=runs/x"])
        assert doc == {"train": {"epochs": 5}, "model": {"latent": {"k": 4}}, "output": {"directory": "runs/x"}}

    def test_override_errors(self):
        with pytest.raises(SpecError):
            apply_overrides({}, ["train.epochs"])
        with pytest.raises(SpecError):
            apply_overrides({"train": 3}, ["train.epochs=1"])

    def test_hash_tracks_content(self, tmp_path):
        a = validate_spec(_doc(tmp_path))
        b = validate_spec(_doc(tmp_path, train={"learning_rate": 0.02}))
        assert config_hash(a) == config_hash(validate_spec(_doc(tmp_path)))
        assert config_hash(a) != config_hash(b)
        assert len(config_hash(a)) == 64

    def test_json_round_trip(self, tmp_path):
        spec = validate_spec(_doc(tmp_path, kind="structured_compare", model={"latent": {"kind": "structured", "n": 3}}))
        assert ExperimentSpec.from_json(spec.to_json()) == spec

    def test_seed_from_environment(self, tmp_path):
        path = _write(tmp_path, _doc(tmp_path / "run"))
        assert load_specs(path, env={})[0].train.seed == 1
        assert load_specs(path, env={"ARGMAXGRAD_SEED": "7"})[0].train.seed == 7

    def test_sweep_needs_distinct_directories(self, tmp_path):
        path = _write(tmp_path, [_doc(tmp_path / "a"), _doc(tmp_path / "a")])
        with pytest.raises(SpecError, match="output directory"):
            load_specs(path, env={})
        path = _write(tmp_path, [_doc(tmp_path / "a"), _doc(tmp_path / "b")], "sweep.json")
        assert len(load_specs(path, env={})) == 2

    @pytest.mark.parametrize(
        "changes",
        [
            {"model": {"latent": {"k": 1}}},
            {"train": {"estimator": {"variant": "annealed"}}},
            {"kind": "semi_supervised"},
            {"kind": "bias_variance", "model": {"latent": {"kind": "structured", "n": 3}}},
            {"model": {"latent": {"kind": "structured", "n": 3, "pairwise": "general"}}, "train": {"estimator": {"variant": "gsm"}}},
            {"model": {"latent": {"kind": "structured", "n": 3}}, "train": {"estimator": {"variant": "score_function"}}},
            {
                "kind": "structured_compare",
                "model": {"latent": {"kind": "structured", "n": 3}},
                "train": {"estimator": {"variant": "gsm"}},
                "compare": ["none", "general"],
            },
            {"train": {"supervision": {"num_labels": 10}}},
        ],
        ids=[
            "k", "variant", "no-supervision", "bv-structured", "gsm-coupled", "score-structured",
            "gsm-compare-coupled", "train-supervised",
        ],
    )
    def test_invalid_specs(self, tmp_path, changes):
        with pytest.raises(SpecError):
            validate_spec(_doc(tmp_path, **changes))

    def test_gsm_accepts_uncoupled_bits(self, tmp_path):
        doc = _doc(tmp_path, model={"latent": {"kind": "structured", "n": 3}}, train={"estimator": {"variant": "gsm"}})
        assert validate_spec(doc).train.estimator.variant == "gsm"

    def test_default_profile_grid(self, tmp_path):
        estimators = validate_spec(_doc(tmp_path, kind="bias_variance")).profile.estimators
        assert estimators[0].variant == "unbiased_enum"
        assert [e.eps for e in estimators if e.variant == "direct"] == [0.1, 0.3, 1.0, 3.0]
        assert [e.tau for e in estimators if e.variant == "gsm"] == [0.1, 0.3, 1.0, 3.0]

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(SpecError, match="not found"):
            load_specs(str(tmp_path / "missing.json"), env={})
        bad = tmp_path / "bad.json"
        bad.write_text("{", encoding="utf-8")
        with pytest.raises(SpecError, match="not valid JSON"):
            load_specs(str(bad), env={})


class TestRuns:
    def test_train_artifacts(self, tmp_path):
        out = tmp_path / "run"
        profile = run(validate_spec(_doc(out)))
        for name in ("metrics.csv", "timing.csv", "summary.json", "report.md", "spec.json", "synthetic_params.json"):
            assert (out / name).exists(), name
        assert (out / "checkpoint" / "weights.npz").exists()
        manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
        assert manifest["epoch"] == 3 and manifest["step"] == 9
        assert manifest["config_hash"] == profile["config_hash"]

        metrics = pd.read_csv(out / "metrics.csv")
        assert list(metrics.columns) == ["epoch", "step", "train_elbo", "test_elbo", "epsilon", "accuracy", "wall_ms"]
        assert metrics["epoch"].tolist() == [1, 2, 3]
        assert (metrics["wall_ms"] == 0).all()
        summary = json.loads((out / "summary.json").read_text())
        assert summary["final_test_loss"] == pytest.approx(metrics["test_elbo"].iloc[-1])
        assert {"wall_seconds", "config_hash", "baseline_test_loss"} <= set(summary)

    def test_runs_are_reproducible(self, tmp_path):
        run(validate_spec(_doc(tmp_path / "a")))
        run(validate_spec(_doc(tmp_path / "b")))
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_resume_matches_uninterrupted_run(self, tmp_path, monkeypatch):
        run(validate_spec(_doc(tmp_path / "straight")))

        real_save = experiments.save_checkpoint

        def crash_at_epoch_two(directory, state, chash):
            if state.epoch == 2:
                raise KeyboardInterrupt
            return real_save(directory, state, chash)

        spec = validate_spec(_doc(tmp_path / "resumed"))
        monkeypatch.setattr(experiments, "save_checkpoint", crash_at_epoch_two)
        with pytest.raises(KeyboardInterrupt):
            run(spec)
        monkeypatch.setattr(experiments, "save_checkpoint", real_save)
        run(spec)

        straight = (tmp_path / "straight" / "metrics.csv").read_bytes()
        assert (tmp_path / "resumed" / "metrics.csv").read_bytes() == straight
        with np.load(tmp_path / "straight" / "checkpoint" / "weights.npz") as a, \
                np.load(tmp_path / "resumed" / "checkpoint" / "weights.npz") as b:
            for key in a.files:
                np.testing.assert_array_equal(a[key], b[key])

    def test_resume_refuses_other_spec(self, tmp_path):
        out = tmp_path / "run"
        run(validate_spec(_doc(out, train={"epochs": 1})))
        with pytest.raises(SpecError, match="different spec"):
            run(validate_spec(_doc(out, train={"epochs": 1, "learning_rate": 0.5})))
        run(validate_spec(_doc(out, train={"epochs": 1, "learning_rate": 0.5}, output={"resume": False})))

    def test_bias_variance(self, tmp_path):
        out = tmp_path / "bv"
        doc = _doc(
            out,
            kind="bias_variance",
            profile={
                "estimators": [{"variant": "unbiased_enum"}, {"variant": "direct", "eps": 1.0}],
                "trials": 5,
                "num_images": 2,
            },
        )
        profile = run(validate_spec(doc))
        stats = pd.read_csv(out / "gradient_stats.csv")
        assert list(stats.columns) == ["knob", "bias_l2", "mean_std", "trials", "variant"]
        assert stats["variant"].tolist() == ["unbiased_enum", "direct"]
        assert stats["bias_l2"].iloc[0] == 0.0
        assert stats["mean_std"].iloc[0] == 0.0
        assert (stats["trials"] == 5).all()
        assert len(profile["gradient_stats"]) == 2
        assert "Gradient bias and variance" in (out / "report.md").read_text()

    def test_structured_compare(self, tmp_path):
        out = tmp_path / "cmp"
        doc = _doc(
            out,
            kind="structured_compare",
            model={"latent": {"kind": "structured", "n": 3}},
            train={"epochs": 1},
            compare=["none", "general"],
        )
        profile = run(validate_spec(doc))
        assert (out / "none" / "metrics.csv").exists() and (out / "general" / "metrics.csv").exists()
        metrics = pd.read_csv(out / "metrics.csv")
        assert metrics.columns[0] == "encoder"
        assert sorted(metrics["encoder"]) == ["general", "none"]
        assert profile["best_encoder"] in ("none", "general")
        assert "Encoder comparison" in (out / "report.md").read_text()

    def test_bias_variance_pretrains_with_exact_gradient(self, tmp_path, monkeypatch):
        variants = []
        estimate = dvae.estimate

        def spy(config, *args, **kwargs):
            variants.append(config.variant)
            return estimate(config, *args, **kwargs)

        monkeypatch.setattr("src.dvae.estimate", spy)
        out = tmp_path / "bv"
        doc = _doc(
            out,
            kind="bias_variance",
            train={"estimator": {"variant": "score_function"}},
            profile={"estimators": [{"variant": "unbiased_enum"}], "pretrain_epochs": 1, "trials": 2, "num_images": 2},
        )
        spec = validate_spec(doc)
        profile = run(spec)
        assert variants and set(variants) == {"unbiased_enum"}

        manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
        assert manifest["epoch"] == 1
        assert manifest["config_hash"] != profile["config_hash"]
        pretrain = spec.train.model_copy(update={"epochs": 1, "estimator": EstimatorConfig(variant="unbiased_enum")})
        assert manifest["config_hash"] == config_hash(spec.model_copy(update={"train": pretrain}))

    def test_structured_compare_with_relaxed_bits(self, tmp_path):
        out = tmp_path / "cmp"
        doc = _doc(
            out,
            kind="structured_compare",
            model={"latent": {"kind": "structured", "n": 3}},
            train={"epochs": 1, "estimator": {"variant": "gsm", "tau": 1.0}},
            compare=["none"],
        )
        profile = run(validate_spec(doc))
        metrics = pd.read_csv(out / "none" / "metrics.csv")
        assert metrics["epoch"].tolist() == [1]
        assert metrics["epsilon"].iloc[0] == pytest.approx(1.0)
        assert np.isfinite(profile["final_test_loss"])

    def test_semi_supervised(self, tmp_path):
        out = tmp_path / "semi"
        doc = _doc(out, kind="semi_supervised", train={"epochs": 1, "supervision": {"num_labels": 16}})
        run(validate_spec(doc))
        summary = json.loads((out / "summary.json").read_text())
        assert 0.0 <= summary["final_accuracy"] <= 1.0


class TestCli:
    def test_run(self, tmp_path, capsys):
        path = _write(tmp_path, _doc(tmp_path / "run"))
        assert argmaxgrad.main(["run", path, "--set", "train.epochs=1"]) == argmaxgrad.EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["kind"] == "train" and "final_test_loss" in out

    def test_profile_verb(self, tmp_path, capsys):
        path = _write(tmp_path, _doc(tmp_path / "bv"))
        code = argmaxgrad.main(["profile", path, "--set", "profile.trials=3", "--set", "train.epochs=0"])
        assert code == argmaxgrad.EXIT_OK
        assert json.loads(capsys.readouterr().out)["kind"] == "bias_variance"
        assert (tmp_path / "bv" / "gradient_stats.csv").exists()

    def test_invalid_spec(self, tmp_path, capsys):
        path = _write(tmp_path, _doc(tmp_path / "run", model={"latent": {"k": 1}}))
        assert argmaxgrad.main(["run", path]) == argmaxgrad.EXIT_SPEC
        assert json.loads(capsys.readouterr().out)["error"] == "spec_error"

    def test_missing_data(self, tmp_path, capsys):
        dataset = {"source": "idx", "train_images": str(tmp_path / "x"), "test_images": str(tmp_path / "y")}
        path = _write(tmp_path, _doc(tmp_path / "run", dataset=dataset))
        assert argmaxgrad.main(["run", path]) == argmaxgrad.EXIT_DATA
        assert json.loads(capsys.readouterr().out)["error"] == "data_error"

    def test_numeric_failure(self, tmp_path, capsys, monkeypatch):
        def explode(spec):
            raise NumericFailure("non-finite gradient")

        monkeypatch.setattr(argmaxgrad, "run", explode)
        path = _write(tmp_path, _doc(tmp_path / "run"))
        assert argmaxgrad.main(["run", path]) == argmaxgrad.EXIT_NUMERIC
        assert json.loads(capsys.readouterr().out)["error"] == "numeric_failure"
