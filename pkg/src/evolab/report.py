"""Aggregate finished runs into the return/violation ratio table."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import parse_pairs
from .errors import InvalidInputError
from .train import ratio_metric, read_metrics

FINAL_EPOCHS = 10


def load_runs(runs_dir) -> list[dict]:
    """One record per run directory that has both config.txt and metrics.csv."""
    out = []
    for d in sorted(Path(runs_dir).iterdir()):
        cfg_path, met_path = d / "config.txt", d / "metrics.csv"
        if not (cfg_path.is_file() and met_path.is_file()):
            continue
        cfg = parse_pairs(cfg_path.read_text().splitlines(), str(cfg_path))
        metrics = read_metrics(met_path)
        if metrics:
            out.append({"name": d.name, "config": cfg, "metrics": metrics})
    return out


def summarize(runs: list[dict], final_epochs: int = FINAL_EPOCHS) -> list[dict]:
    """Seed-averaged final-epoch statistics per (env, mode) with ratios.

    Ratios are normalised within each environment by the sum of their
    absolute values, so a table over several algorithms sums to 1 when
    all returns are positive.
    """
    groups = defaultdict(list)
    for run in runs:
        cfg = run["config"]
        tail = run["metrics"][-final_epochs:]
        groups[(cfg["env_id"], cfg["mode"])].append((
            float(np.mean([m.mean_return for m in tail])),
            float(np.mean([m.mean_cost for m in tail])),
            float(np.mean([m.violation_rate for m in tail])),
            float(cfg.get("eps_stability", 0.01)),
        ))
    rows = []
    for (env_id, mode), vals in sorted(groups.items()):
        a = np.array(vals)
        ret, cost, viol = a[:, 0].mean(), a[:, 1].mean(), a[:, 2].mean()
        rows.append({"env_id": env_id, "mode": mode, "seeds": len(vals),
                     "mean_return": ret, "return_std": a[:, 0].std(),
                     "mean_cost": cost, "violation_rate": viol,
                     "ratio": ratio_metric(ret, viol, a[0, 3])})
    for env_id in {r["env_id"] for r in rows}:
        same = [r for r in rows if r["env_id"] == env_id]
        total = sum(abs(r["ratio"]) for r in same)
        for r in same:
            r["normalized_ratio"] = r["ratio"] / total if total > 0 else 0.0
    return rows


def format_table(rows: list[dict]) -> str:
    head = ("env_id", "mode", "seeds", "mean_return", "return_std", "mean_cost",
            "violation_rate", "ratio", "normalized_ratio")
    lines = ["\t".join(head)]
    for r in rows:
        lines.append("\t".join(str(r[k]) if isinstance(r[k], (str, int)) else f"{r[k]:.4f}"
                               for k in head))
    return "\n".join(lines) + "\n"


def report(runs_dir, final_epochs: int = FINAL_EPOCHS) -> str:
    runs = load_runs(runs_dir)
    if not runs:
        raise InvalidInputError(f"no finished runs under {runs_dir}")
    return format_table(summarize(runs, final_epochs))
