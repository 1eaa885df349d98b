# src/experiments.py

"""
Experiment specs and the runner behind the CLI. A spec is a JSON object
(a list of them for a sweep) validated into ExperimentSpec; `run` executes
one spec and leaves its artifacts in the output directory:

    metrics.csv    epoch,step,train_elbo,test_elbo,epsilon,accuracy,wall_ms
    timing.csv     epoch,step_ms_median,wall_ms
    checkpoint/    weights.npz + manifest.json of the last completed epoch
    summary.json   final_test_loss, wall_seconds, config_hash, ...
    report.md      human-readable summary
    spec.json      the validated spec
"""

import hashlib
import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator

from .analyzer import compare_variants
from .data_io import (
    Dataset,
    binarize,
    load_idx,
    save_synthetic_params,
    subset,
    synthetic_dataset,
)
from .dataset_fetch import dataset_paths
from .dvae import (
    ConfigurationError,
    LatentSpec,
    TrainConfig,
    TrainState,
    build_model,
    check_compatible,
    evaluate,
    fit,
    init_state,
)
from .estimators import (
    EstimatorConfig,
    bias_variance_profile,
    stats_frame,
    unbiased_gradient,
)
from .reporting import (
    append_metrics,
    append_timing,
    ensure_run_dirs,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    truncate_epochs,
    write_run_report,
)

logger = logging.getLogger(__name__)

SEED_ENV = "ARGMAXGRAD_SEED"

Kind = Literal["train", "bias_variance", "structured_compare", "semi_supervised"]
Pairwise = Literal["none", "supermodular", "general"]


class SpecError(Exception):
    pass


# ---------------------------------------------------------------------------
# spec models
# ---------------------------------------------------------------------------


class DatasetBinding(BaseModel):
    source: Literal["synthetic", "idx"] = "synthetic"
    # synthetic
    kind: Literal["bars", "mixture"] = "bars"
    side: int = Field(default=4, ge=2)
    components: int = Field(default=3, ge=1)
    train_size: int = Field(default=1000, ge=1)
    test_size: int = Field(default=200, ge=1)
    # idx: either a fetch directory or explicit paths
    root: Optional[str] = None
    name: Literal["mnist", "fashion"] = "mnist"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_limit: Optional[int] = Field(default=None, ge=1)
    test_limit: Optional[int] = Field(default=None, ge=1)

    binarize: Literal["threshold", "stochastic", "none"] = "threshold"
    seed: int = 0

    @model_validator(mode="after")
    def _idx_needs_files(self):
        if self.source == "idx" and self.root is None:
            if self.train_images is None or self.test_images is None:
                raise ValueError("idx datasets need `root` or both train_images and test_images")
        return self


class ModelSpec(BaseModel):
    latent: LatentSpec = Field(default_factory=LatentSpec)
    hidden: int = Field(default=300, ge=1)


def _default_profile_estimators() -> List[EstimatorConfig]:
    knobs = (0.1, 0.3, 1.0, 3.0)
    direct = [EstimatorConfig(variant="direct", eps=e) for e in knobs]
    relaxed = [EstimatorConfig(variant="gsm", tau=t) for t in knobs]
    return [EstimatorConfig(variant="unbiased_enum")] + direct + relaxed


class ProfileConfig(BaseModel):
    estimators: List[EstimatorConfig] = Field(default_factory=_default_profile_estimators)
    trials: int = Field(default=1000, ge=2)
    num_images: int = Field(default=1, ge=1)
    pretrain_epochs: int = Field(default=0, ge=0)


class OutputConfig(BaseModel):
    directory: str = "runs/default"
    wall_clock: bool = True
    resume: bool = True


class ExperimentSpec(BaseModel):
    kind: Kind = "train"
    dataset: DatasetBinding = Field(default_factory=DatasetBinding)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    profile: ProfileConfig = Field(default_factory=ProfileConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    compare: List[Pairwise] = Field(default_factory=lambda: ["none", "supermodular", "general"])

    @model_validator(mode="after")
    def _kind_matches_model(self):
        latent = self.model.latent
        if self.kind == "semi_supervised" and self.train.supervision is None:
            raise ValueError("semi_supervised runs need train.supervision")
        if self.kind == "train" and self.train.supervision is not None:
            raise ValueError("train.supervision is only used by semi_supervised runs")
        if self.kind == "structured_compare":
            if latent.kind != "structured":
                raise ValueError("structured_compare needs model.latent.kind = structured")
            if not self.compare:
                raise ValueError("structured_compare needs at least one encoder family")
        if self.kind in ("bias_variance", "semi_supervised") and latent.kind != "categorical":
            raise ValueError(f"{self.kind} runs need a categorical latent")
        return self

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        return cls.model_validate_json(text)


def config_hash(spec: ExperimentSpec) -> str:
    """SHA-256 of the canonical (sorted-key) JSON dump of the spec."""
    canonical = json.dumps(spec.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# loading and overrides
# ---------------------------------------------------------------------------


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: Dict[str, Any], assignments: Sequence[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` assignments to a spec document (values parsed as JSON)."""
    out = json.loads(json.dumps(doc))
    for assignment in assignments:
        if "=" not in assignment:
            raise SpecError(f"override '{assignment}' is not of the form key=value")
        path, raw = assignment.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            raise SpecError(f"override '{assignment}' has an empty key")
        node = out
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = node[key] = {}
            elif not isinstance(child, dict):
                raise SpecError(f"override '{assignment}': '{key}' is not an object")
            node = child
        node[keys[-1]] = _parse_value(raw)
    return out


def validate_spec(doc: Dict[str, Any]) -> ExperimentSpec:
    try:
        spec = ExperimentSpec.model_validate(doc)
        check_compatible(spec.model.latent, spec.train)
        if spec.kind == "structured_compare":
            for pairwise in spec.compare:
                check_compatible(spec.model.latent.model_copy(update={"pairwise": pairwise}), spec.train)
    except ValidationError as e:
        raise SpecError(str(e)) from e
    except ConfigurationError as e:
        raise SpecError(str(e)) from e
    return spec


def load_specs(
    path: str,
    overrides: Sequence[str] = (),
    env: Optional[Dict[str, str]] = None,
) -> List[ExperimentSpec]:
    """
    Read a spec file (object or list), apply overrides and the seed variable,
    and validate every entry. Sweep entries must write to distinct directories.
    """
    env = os.environ if env is None else env
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise SpecError(f"spec file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise SpecError(f"spec file {path} is not valid JSON: {e}") from e

    docs = raw if isinstance(raw, list) else [raw]
    if not docs or not all(isinstance(d, dict) for d in docs):
        raise SpecError("a spec file holds an object or a non-empty list of objects")

    assignments = list(overrides)
    if env.get(SEED_ENV):
        assignments.append(f"train.seed={env[SEED_ENV]}")

    specs = [validate_spec(apply_overrides(d, assignments)) for d in docs]
    dirs = [os.path.abspath(s.output.directory) for s in specs]
    if len(set(dirs)) != len(dirs):
        raise SpecError("sweep entries share an output directory")
    return specs


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _split(d: Dataset, n_train: int) -> Tuple[Dataset, Dataset]:
    labels = d.labels
    train = Dataset(d.images[:n_train], None if labels is None else labels[:n_train], "train", d.image_shape, dict(d.meta))
    test = Dataset(d.images[n_train:], None if labels is None else labels[n_train:], "test", d.image_shape, dict(d.meta))
    return train, test


def load_datasets(binding: DatasetBinding) -> Tuple[Dataset, Dataset]:
    if binding.source == "synthetic":
        # one draw split in two, so both halves share the mixture parameters
        full = synthetic_dataset(
            binding.kind,
            binding.train_size + binding.test_size,
            seed=binding.seed,
            components=binding.components,
            side=binding.side,
        )
        train, test = _split(full, binding.train_size)
    else:
        if binding.root is not None:
            tr_img, tr_lab, te_img, te_lab = dataset_paths(binding.root, binding.name)
        else:
            tr_img, tr_lab = binding.train_images, binding.train_labels
            te_img, te_lab = binding.test_images, binding.test_labels
        train = load_idx(tr_img, tr_lab, split="train")
        test = load_idx(te_img, te_lab, split="test")
        if binding.train_limit is not None:
            train = subset(train, binding.train_limit)
        if binding.test_limit is not None:
            test = subset(test, binding.test_limit)

    if binding.binarize != "none":
        train = binarize(train, binding.binarize, seed=binding.seed)
        test = binarize(test, binding.binarize, seed=binding.seed + 1)
    return train, test


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


def _remove(*paths: str) -> None:
    for p in paths:
        if os.path.exists(p):
            os.remove(p)


def _train_run(
    spec: ExperimentSpec,
    root: str,
    latent: LatentSpec,
    train: Dataset,
    test: Dataset,
    chash: str,
) -> Tuple[TrainState, float]:
    """
    Train one model into `root`, resuming from its checkpoint when present.
    Returns the final state and the untrained baseline test loss.
    """
    dirs = ensure_run_dirs(root)
    config = spec.train
    model = build_model(latent, train.num_pixels, spec.model.hidden, seed=config.seed)
    baseline = evaluate(model, test, config.eval_mc_samples, seed=config.seed).loss
    state = init_state(model, config)

    metrics_path = os.path.join(dirs["root"], "metrics.csv")
    timing_path = os.path.join(dirs["root"], "timing.csv")
    manifest = read_manifest(dirs["checkpoint"]) if spec.output.resume else None
    if manifest is not None:
        if manifest.get("config_hash") != chash:
            raise SpecError(
                f"{dirs['root']} holds a run of a different spec; "
                "choose another output.directory or set output.resume=false"
            )
        load_checkpoint(dirs["checkpoint"], state)
        truncate_epochs(metrics_path, state.epoch)
        truncate_epochs(timing_path, state.epoch)
        logger.info("resuming %s from epoch %d (step %d)", dirs["root"], state.epoch, state.step)
    else:
        _remove(metrics_path, timing_path)

    # rows first: rows past the checkpoint epoch are dropped on resume
    def on_epoch(state: TrainState, row: Dict[str, float]) -> None:
        append_metrics(metrics_path, row)
        append_timing(timing_path, row)
        save_checkpoint(dirs["checkpoint"], state, chash)

    fit(state, train, test, config, on_epoch=on_epoch, wall_clock=spec.output.wall_clock)
    if config.epochs == 0:
        save_checkpoint(dirs["checkpoint"], state, chash)
    return state, baseline


def _read_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path) if os.path.exists(path) else pd.DataFrame()


def _run_training(spec: ExperimentSpec, root: str, chash: str, train: Dataset, test: Dataset) -> Dict[str, Any]:
    state, baseline = _train_run(spec, root, spec.model.latent, train, test, chash)
    result = evaluate(state.model, test, spec.train.eval_mc_samples, seed=spec.train.seed)
    return {
        "final_test_loss": result.loss,
        "final_accuracy": result.accuracy,
        "baseline_test_loss": baseline,
        "epochs_completed": state.epoch,
        "steps": state.step,
    }


def _run_structured_compare(
    spec: ExperimentSpec, root: str, chash: str, train: Dataset, test: Dataset
) -> Dict[str, Any]:
    metrics, timing, frames, finals = [], [], {}, {}
    for pairwise in spec.compare:
        latent = spec.model.latent.model_copy(update={"pairwise": pairwise})
        sub = os.path.join(root, pairwise)
        state, _ = _train_run(spec, sub, latent, train, test, chash)
        finals[pairwise] = evaluate(state.model, test, spec.train.eval_mc_samples, seed=spec.train.seed).loss

        m = _read_csv(os.path.join(sub, "metrics.csv"))
        t = _read_csv(os.path.join(sub, "timing.csv"))
        if not m.empty:
            metrics.append(m.assign(encoder=pairwise))
            merged = m.merge(t[["epoch", "step_ms_median"]], on="epoch", how="left") if not t.empty else m
            frames[pairwise] = merged
        if not t.empty:
            timing.append(t.assign(encoder=pairwise))

    if metrics:
        df = pd.concat(metrics, ignore_index=True)
        df[["encoder"] + [c for c in df.columns if c != "encoder"]].to_csv(os.path.join(root, "metrics.csv"), index=False)
    if timing:
        df = pd.concat(timing, ignore_index=True)
        df[["encoder"] + [c for c in df.columns if c != "encoder"]].to_csv(os.path.join(root, "timing.csv"), index=False)

    best = min(finals, key=finals.get)
    return {
        "final_test_loss": finals[best],
        "best_encoder": best,
        "final_test_losses": finals,
        "variants": compare_variants(frames),
    }


def _run_bias_variance(
    spec: ExperimentSpec, root: str, chash: str, train: Dataset, test: Dataset
) -> Dict[str, Any]:
    profile = spec.profile
    # pretraining follows the exact gradient whatever estimators are profiled
    pretrain_config = spec.train.model_copy(
        update={"epochs": profile.pretrain_epochs, "estimator": EstimatorConfig(variant="unbiased_enum")}
    )
    pretrain = spec.model_copy(update={"train": pretrain_config})
    state, baseline = _train_run(pretrain, root, spec.model.latent, train, test, config_hash(pretrain))
    model = state.model

    x = test.images[: profile.num_images]
    reference = unbiased_gradient(model.encoder, model.decoder, x, model.latent.k)
    stats = bias_variance_profile(
        profile.estimators, reference, profile.trials, model.encoder, model.decoder, x, seed=spec.train.seed
    )
    stats_frame(stats).to_csv(os.path.join(root, "gradient_stats.csv"), index=False)

    result = evaluate(model, test, spec.train.eval_mc_samples, seed=spec.train.seed)
    return {
        "final_test_loss": result.loss,
        "baseline_test_loss": baseline,
        "gradient_stats": [s.model_dump(exclude={"mean", "std"}) for s in stats],
    }


_RUNNERS = {
    "train": _run_training,
    "semi_supervised": _run_training,
    "structured_compare": _run_structured_compare,
    "bias_variance": _run_bias_variance,
}


def run(spec: ExperimentSpec) -> Dict[str, Any]:
    """
    High-level pipeline:
      1. Load (or synthesize) the train/test split
      2. Train, resuming from the output directory's checkpoint if any
      3. Kind-specific extras (gradient statistics, encoder comparison)
      4. Save summary.json and report.md
      5. Return the profile dict
    """
    started = time.monotonic()
    chash = config_hash(spec)
    dirs = ensure_run_dirs(spec.output.directory)
    root = dirs["root"]
    Path(root, "spec.json").write_text(spec.to_json(), encoding="utf-8")

    train, test = load_datasets(spec.dataset)
    if spec.dataset.source == "synthetic":
        save_synthetic_params(train, os.path.join(root, "synthetic_params.json"))
    logger.info(
        "%s run: %d train / %d test images, config %s",
        spec.kind, len(train), len(test), chash[:12],
    )

    profile = _RUNNERS[spec.kind](spec, root, chash, train, test)
    profile.update(
        {
            "kind": spec.kind,
            "config_hash": chash,
            "wall_seconds": time.monotonic() - started,
        }
    )
    metrics = _read_csv(os.path.join(root, "metrics.csv"))
    timing = _read_csv(os.path.join(root, "timing.csv"))
    if spec.kind == "structured_compare":
        metrics, timing = None, None
    return write_run_report(root, profile, metrics, timing)
