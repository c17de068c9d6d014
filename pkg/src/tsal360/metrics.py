"""Saliency evaluation measures: Pearson CC, histogram similarity, KL divergence.

All three operate on a predicted and a ground-truth map of equal shape.
SIM and KLD first normalize each map to sum to one; CC standardizes each
map to zero mean and unit variance.  KLD uses the benchmark convention
``sum(q * ln(q / (p + eps) + eps))`` with the ground truth as q and
eps = 1e-7.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-7


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    q = np.asarray(gt, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"map shapes differ: {p.shape} vs {q.shape}")
    return p, q


def _sum_normalize(m: np.ndarray) -> np.ndarray:
    s = m.sum()
    if s <= 0:
        raise ValueError("cannot sum-normalize a map with nonpositive total mass")
    return m / s


def cc(pred, gt) -> float:
    """Pearson correlation between the two maps over pixels."""
    p, q = _pair(pred, gt)
    ps, qs = p.std(), q.std()
    if ps == 0.0 or qs == 0.0:
        raise ValueError("correlation undefined for a zero-variance map")
    p = (p - p.mean()) / ps
    q = (q - q.mean()) / qs
    return float((p * q).mean())


def sim(pred, gt) -> float:
    """Histogram intersection of the sum-normalized maps, in [0, 1]."""
    p, q = _pair(pred, gt)
    return float(np.minimum(_sum_normalize(p), _sum_normalize(q)).sum())


def kld(pred, gt) -> float:
    """KL divergence of prediction from ground truth (gt is the reference q)."""
    p, q = _pair(pred, gt)
    p = _sum_normalize(p)
    q = _sum_normalize(q)
    return float(np.sum(q * np.log(q / (p + EPS) + EPS)))


@dataclass
class MetricsReport:
    """Mean and spread of each measure over a set of map pairs."""

    cc_mean: float
    cc_std: float
    sim_mean: float
    sim_std: float
    kld_mean: float
    kld_std: float
    n: int


def score_pairs(pairs) -> list[dict[str, float]]:
    """Per-sample scores for an iterable of (pred, gt) map pairs."""
    return [{"cc": cc(p, q), "sim": sim(p, q), "kld": kld(p, q)} for p, q in pairs]


def _report(cc_vals, sim_vals, kld_vals, n) -> MetricsReport:
    pop_std = lambda v: float(np.std(v)) if len(v) else 0.0
    return MetricsReport(
        cc_mean=float(np.mean(cc_vals)),
        cc_std=pop_std(cc_vals),
        sim_mean=float(np.mean(sim_vals)),
        sim_std=pop_std(sim_vals),
        kld_mean=float(np.mean(kld_vals)),
        kld_std=pop_std(kld_vals),
        n=n,
    )


def aggregate(scores: list[dict[str, float]], fold_of: list[int]) -> dict:
    """Fold-wise and overall mean +- std of per-sample scores.

    ``fold_of[i]`` assigns sample i to a fold.  Within a fold, samples are
    averaged unweighted.  The overall row is the mean of the fold means with
    the population std across folds; a per-sample std over the pooled
    samples is reported alongside.
    """
    if len(scores) != len(fold_of):
        raise ValueError(f"{len(scores)} scores but {len(fold_of)} fold assignments")
    if not scores:
        raise ValueError("no scores to aggregate")
    folds = sorted(set(fold_of))
    per_fold = {}
    fold_means = {"cc": [], "sim": [], "kld": []}
    for f in folds:
        rows = [s for s, g in zip(scores, fold_of) if g == f]
        rep = _report([r["cc"] for r in rows], [r["sim"] for r in rows], [r["kld"] for r in rows], len(rows))
        per_fold[f] = rep
        fold_means["cc"].append(rep.cc_mean)
        fold_means["sim"].append(rep.sim_mean)
        fold_means["kld"].append(rep.kld_mean)
    overall = _report(fold_means["cc"], fold_means["sim"], fold_means["kld"], len(scores))
    sample_level = _report(
        [s["cc"] for s in scores], [s["sim"] for s in scores], [s["kld"] for s in scores], len(scores)
    )
    return {"folds": per_fold, "overall": overall, "samples": sample_level}


def report_csv(agg: dict) -> str:
    """Render an aggregate as ``fold,metric,mean,std`` CSV text."""
    lines = ["fold,metric,mean,std"]
    for f, rep in agg["folds"].items():
        for metric in ("cc", "sim", "kld"):
            lines.append(
                f"{f},{metric},{getattr(rep, metric + '_mean'):.6f},{getattr(rep, metric + '_std'):.6f}"
            )
    for label in ("overall", "samples"):
        rep = agg[label]
        for metric in ("cc", "sim", "kld"):
            lines.append(
                f"{label},{metric},{getattr(rep, metric + '_mean'):.6f},{getattr(rep, metric + '_std'):.6f}"
            )
    return "\n".join(lines) + "\n"


def report_table(agg: dict) -> str:
    """Render an aggregate as an aligned text table (one row per fold)."""
    header = f"{'fold':>8} | {'CC':>16} | {'SIM':>16} | {'KLD':>16}"
    rule = "-" * len(header)
    fmt = lambda m, s: f"{m:7.3f} +- {s:5.3f}"
    rows = [header, rule]
    for f, rep in agg["folds"].items():
        rows.append(
            f"{f!s:>8} | {fmt(rep.cc_mean, rep.cc_std):>16} | "
            f"{fmt(rep.sim_mean, rep.sim_std):>16} | {fmt(rep.kld_mean, rep.kld_std):>16}"
        )
    rep = agg["overall"]
    rows.append(rule)
    rows.append(
        f"{'overall':>8} | {fmt(rep.cc_mean, rep.cc_std):>16} | "
        f"{fmt(rep.sim_mean, rep.sim_std):>16} | {fmt(rep.kld_mean, rep.kld_std):>16}"
    )
    return "\n".join(rows) + "\n"
