# src/analyzer.py

import pandas as pd
from typing import Dict, Any, Optional


def summarize_numeric(series: Optional[pd.Series]) -> Dict[str, Any]:
    if series is None:
        return {}
    series = pd.to_numeric(series, errors="coerce").dropna()
    if series.empty:
        return {}
    return {
        "count": int(series.count()),
        "min": float(series.min()),
        "max": float(series.max()),
        "mean": float(series.mean()),
        "median": float(series.median()),
        "std": float(series.std(ddof=0)) if series.count() > 1 else 0.0,
        "p25": float(series.quantile(0.25)),
        "p75": float(series.quantile(0.75)),
    }


def analyze_history(metrics: pd.DataFrame, timing: Optional[pd.DataFrame] = None) -> Dict[str, Any]:
    """
    Takes the per-epoch metrics table (and optionally the timing table) and
    returns a structured summary dict.
    """
    test = pd.to_numeric(metrics.get("test_elbo"), errors="coerce")
    first = float(test.iloc[0]) if len(test) else float("nan")
    final = float(test.iloc[-1]) if len(test) else float("nan")

    summary = {
        "epochs": int(len(metrics)),
        "first_test_elbo": first,
        "final_test_elbo": final,
        "best_test_elbo": float(test.min()) if len(test) else float("nan"),
        "improvement": first - final,
        "test_elbo_stats": summarize_numeric(test),
        "train_elbo_stats": summarize_numeric(metrics.get("train_elbo")),
    }
    if "accuracy" in metrics.columns:
        accuracy = pd.to_numeric(metrics["accuracy"], errors="coerce").dropna()
        if not accuracy.empty:
            summary["final_accuracy"] = float(accuracy.iloc[-1])
    if timing is not None and not timing.empty:
        summary["step_ms"] = summarize_numeric(timing.get("step_ms_median"))
    return summary


def compare_variants(frames: Dict[str, pd.DataFrame]) -> Dict[str, Dict[str, Any]]:
    """analyze_history per named run, e.g. one per structured encoder family."""
    out = {}
    for name, df in frames.items():
        timing = df[["epoch", "step_ms_median"]] if "step_ms_median" in df.columns else None
        out[name] = analyze_history(df, timing)
    return out
