# src/reporting.py

import json
import os
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from .analyzer import analyze_history
from .dvae import LatentSpec, TrainState

CHECKPOINT_FORMAT_VERSION = 1

METRIC_COLUMNS = ["epoch", "step", "train_elbo", "test_elbo", "epsilon", "accuracy", "wall_ms"]
TIMING_COLUMNS = ["epoch", "step_ms_median", "wall_ms"]


class CheckpointError(Exception):
    pass


def ensure_run_dirs(output_dir: str) -> dict:
    root = os.path.abspath(output_dir)
    os.makedirs(root, exist_ok=True)
    checkpoints = os.path.join(root, "checkpoint")
    os.makedirs(checkpoints, exist_ok=True)
    return {"root": root, "checkpoint": checkpoints}


# ---------------------------------------------------------------------------
# CSV / JSON artifacts
# ---------------------------------------------------------------------------


def append_metrics(path: str, row: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> None:
    """Append one epoch row; the header is written with the first row only."""
    record = {c: row[c] for c in METRIC_COLUMNS}
    if extra:
        record = {**extra, **record}
    pd.DataFrame([record]).to_csv(path, mode="a", header=not os.path.exists(path), index=False)


def truncate_epochs(path: str, last_epoch: int) -> None:
    """Drop rows past `last_epoch` (left behind by an interrupted run)."""
    if not os.path.exists(path):
        return
    df = pd.read_csv(path, float_precision="round_trip")
    df = df[df["epoch"] <= last_epoch]
    df.to_csv(path, index=False)


def append_timing(path: str, row: Dict[str, Any]) -> None:
    record = {c: row[c] for c in TIMING_COLUMNS}
    pd.DataFrame([record]).to_csv(path, mode="a", header=not os.path.exists(path), index=False)


def write_json(path: str, payload: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    checkpoint_dir: str,
    state: TrainState,
    config_hash: str,
) -> str:
    """
    weights.npz holds every parameter and optimizer buffer as float64;
    manifest.json records shapes, latent spec, step, epoch and config hash.
    The manifest is written last, so a readable manifest means a whole checkpoint.
    """
    params = state.model.named_parameters()
    arrays = {f"param.{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()}
    arrays.update({f"optim.{k}": np.asarray(v) for k, v in state.optimizer.state_dict().items()})

    weights_path = os.path.join(checkpoint_dir, "weights.npz")
    tmp = os.path.join(checkpoint_dir, "weights.tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, weights_path)

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "latent": state.model.latent.model_dump(),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "step": state.step,
        "epoch": state.epoch,
        "config_hash": config_hash,
    }
    manifest_path = os.path.join(checkpoint_dir, "manifest.json")
    tmp_manifest = manifest_path + ".tmp"
    write_json(tmp_manifest, manifest)
    os.replace(tmp_manifest, manifest_path)
    return manifest_path


def read_manifest(checkpoint_dir: str) -> Optional[Dict[str, Any]]:
    path = os.path.join(checkpoint_dir, "manifest.json")
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_checkpoint(checkpoint_dir: str, state: TrainState) -> Dict[str, Any]:
    """Restore parameters, optimizer buffers and counters into `state` in place."""
    manifest = read_manifest(checkpoint_dir)
    if manifest is None:
        raise CheckpointError(f"no checkpoint in {checkpoint_dir}")
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    if LatentSpec(**manifest["latent"]) != state.model.latent:
        raise CheckpointError("checkpoint latent spec differs from the model")

    params = state.model.named_parameters()
    with np.load(os.path.join(checkpoint_dir, "weights.npz")) as data:
        for key, target in params.items():
            stored = data[f"param.{key}"]
            if stored.shape != target.shape:
                raise CheckpointError(f"{key}: checkpoint shape {stored.shape}, model {target.shape}")
            target[...] = stored
        optim = {k[len("optim."):]: data[k] for k in data.files if k.startswith("optim.")}
    state.optimizer.load_state_dict(optim)
    state.step = int(manifest["step"])
    state.epoch = int(manifest["epoch"])
    return manifest


# ---------------------------------------------------------------------------
# markdown report
# ---------------------------------------------------------------------------


def _fmt(val) -> str:
    try:
        return f"{val:.4f}"
    except (TypeError, ValueError):
        return str(val)


def _write_markdown_report(profile: Dict[str, Any], out_path: str) -> None:
    lines = []
    lines.append(f"# Run report: {profile.get('kind', '')}")
    lines.append("")
    lines.append(f"- Config hash: `{profile.get('config_hash', '')}`")
    if "final_test_loss" in profile:
        lines.append(f"- Final test loss: **{_fmt(profile['final_test_loss'])}**")
    if profile.get("final_accuracy") is not None:
        lines.append(f"- Final accuracy: **{_fmt(profile['final_accuracy'])}**")
    lines.append(f"- Wall seconds: {_fmt(profile.get('wall_seconds', 0.0))}")
    lines.append("")

    history = profile.get("history", {})
    if history:
        lines.append("## Test loss over epochs")
        lines.append("")
        lines.append("| Metric | Value |")
        lines.append("|--------|-------|")
        for key in ["epochs", "first_test_elbo", "final_test_elbo", "best_test_elbo", "improvement"]:
            if key in history:
                lines.append(f"| {key} | {_fmt(history[key])} |")
        lines.append("")

        step_ms = history.get("step_ms", {})
        if step_ms:
            lines.append("### Step time (ms)")
            lines.append("")
            lines.append("| Metric | Value |")
            lines.append("|--------|-------|")
            for key in ["median", "p25", "p75", "max"]:
                if key in step_ms:
                    lines.append(f"| {key} | {_fmt(step_ms[key])} |")
            lines.append("")

    variants = profile.get("variants", {})
    if variants:
        lines.append("## Encoder comparison")
        lines.append("")
        lines.append("| Encoder | Final test loss | Median step ms |")
        lines.append("|---------|-----------------|----------------|")
        for name, summary in variants.items():
            lines.append(
                f"| {name} | {_fmt(summary.get('final_test_elbo'))} | "
                f"{_fmt(summary.get('step_ms', {}).get('median', 0.0))} |"
            )
        lines.append("")

    stats = profile.get("gradient_stats", [])
    if stats:
        lines.append("## Gradient bias and variance")
        lines.append("")
        lines.append("| Variant | Knob | Bias (L2) | Mean std | Trials |")
        lines.append("|---------|------|-----------|----------|--------|")
        for s in stats:
            lines.append(
                f"| {s['variant']} | {_fmt(s['knob'])} | {_fmt(s['bias_l2'])} | "
                f"{_fmt(s['mean_std'])} | {s['trials']} |"
            )
        lines.append("")

    with open(out_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))


def write_run_report(
    root: str,
    profile: Dict[str, Any],
    metrics: Optional[pd.DataFrame] = None,
    timing: Optional[pd.DataFrame] = None,
) -> Dict[str, Any]:
    """
    Save summary.json and report.md under `root`. The summary keeps the
    machine-readable fields; the markdown adds history statistics.
    """
    keys = ("final_test_loss", "wall_seconds", "config_hash", "baseline_test_loss", "final_accuracy")
    summary = {k: profile[k] for k in keys if profile.get(k) is not None}
    write_json(os.path.join(root, "summary.json"), summary)

    detailed = dict(profile)
    if metrics is not None and not metrics.empty:
        detailed["history"] = analyze_history(metrics, timing)
    _write_markdown_report(detailed, os.path.join(root, "report.md"))
    return detailed
