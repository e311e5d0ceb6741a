"""ECDFs of MCS samples, the area-between-ECDFs gain, convergence curves and CSV export."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .wlan import NUM_MCS

MCS_RANGE = NUM_MCS - 1


@dataclass(frozen=True)
class EcdfCurve:
    """Right-continuous step function over distinct sample values."""

    values: np.ndarray  # sorted distinct sample values
    probs: np.ndarray  # G(values[i]) = P(X <= values[i])
    n: int
    mean: float

    def __call__(self, x):
        idx = np.searchsorted(self.values, np.asarray(x, dtype=float), side="right")
        return np.where(idx == 0, 0.0, self.probs[np.maximum(idx - 1, 0)])


def ecdf(samples) -> EcdfCurve:
    s = np.asarray(samples, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("ecdf of an empty sample")
    values, counts = np.unique(s, return_counts=True)
    probs = np.cumsum(counts) / s.size
    probs[-1] = 1.0
    return EcdfCurve(values, probs, int(s.size), float(s.mean()))


def gain_theta(curve_x: EcdfCurve, curve_y: EcdfCurve) -> float:
    """Area between the two ECDFs, which collapses to the difference of means.

    Positive when X sits to the right of Y (X has the larger mean).
    """
    return curve_x.mean - curve_y.mean


def convergence_curve(series, window: int) -> np.ndarray:
    """Centred moving average; windows are truncated at both ends."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n == 0:
        return x.copy()
    lo = (window - 1) // 2
    hi = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(n)
    a = np.maximum(i - lo, 0)
    b = np.minimum(i + hi + 1, n)
    out = (csum[b] - csum[a]) / (b - a)
    if window == 1:
        return x.copy()
    return out


def theta_percent(theta: float) -> float:
    """Theta as a share of the 13-step MCS range."""
    return 100.0 * theta / MCS_RANGE


def _samples(rl, band, ap, fraction):
    win = rl.mcs_window(band, fraction)
    if ap == "pooled":
        return win.ravel()
    if ap == "team":
        return win.min(axis=1)
    return win[:, int(ap)]


SAMPLE_KINDS = ("pooled", "team")


def theta_table(runs: dict, fraction: float = 0.2) -> list[dict]:
    """Pairwise Theta per band and per AP, aggregated over the seeds both variants share.

    ``runs`` maps variant name -> list of RunLogs. Pairs follow dict order
    (X before Y). For each pair and band there are two aggregate rows
    (``pooled``: every AP's samples together, ``team``: per-step min over APs)
    followed by one row per AP.
    """
    rows = []
    names = list(runs)
    for vx, vy in itertools.combinations(names, 2):
        by_seed_x = {rl.seed: rl for rl in runs[vx]}
        by_seed_y = {rl.seed: rl for rl in runs[vy]}
        seeds = sorted(set(by_seed_x) & set(by_seed_y))
        if not seeds:
            continue
        ref = by_seed_x[seeds[0]]
        for other in list(by_seed_x.values()) + list(by_seed_y.values()):
            if other.band_ids != ref.band_ids or other.n_aps != ref.n_aps:
                raise ValueError(f"variants {vx} and {vy} were run on different scenarios")
        for band in ref.band_ids:
            for ap in list(SAMPLE_KINDS) + list(range(ref.n_aps)):
                th = np.array([gain_theta(ecdf(_samples(by_seed_x[s], band, ap, fraction)),
                                          ecdf(_samples(by_seed_y[s], band, ap, fraction))) for s in seeds])
                rows.append({
                    "variant_x": vx, "variant_y": vy, "band": band, "ap": str(ap),
                    "theta": float(th.mean()), "theta_std": float(th.std()),
                    "theta_pct": theta_percent(float(th.mean())),
                    "n_pos": int((th > 0).sum()), "n_neg": int((th < 0).sum()), "n_seeds": len(seeds),
                })
    return rows


THETA_COLUMNS = ["variant_x", "variant_y", "band", "ap", "theta", "theta_std", "theta_pct",
                 "n_pos", "n_neg", "n_seeds"]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows):
    lines = [",".join(columns)]
    lines += [",".join(_fmt(r[c]) for c in columns) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def export(runs: dict, out_dir, band_ids=None, window: int = 5, fraction: float = 0.2) -> list[Path]:
    """Write ecdf_<band>.csv, theta.csv and convergence_<band>.csv under ``out_dir``.

    ECDF tables pool the final-window per-AP samples over seeds, per variant.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if band_ids is None:
        band_ids = next((rls[0].band_ids for rls in runs.values() if rls), [])
    written = []
    for band in band_ids:
        rows = []
        for v, rls in runs.items():
            if not rls:
                continue
            pooled = np.concatenate([_samples(rl, band, "pooled", fraction) for rl in rls])
            if pooled.size == 0:
                continue
            c = ecdf(pooled)
            rows += [{"variant": v, "mcs": int(x), "prob": float(p), "n": c.n} for x, p in zip(c.values, c.probs)]
        p = out / f"ecdf_{band}.csv"
        write_csv(p, ["variant", "mcs", "prob", "n"], rows)
        written.append(p)

        rows = []
        for v, rls in runs.items():
            for rl in sorted(rls, key=lambda r: r.seed):
                steps = [r.step for r in rl.rows if r.band == band]
                rew = rl.band_rewards(band)
                sm = convergence_curve(rew, window)
                rows += [{"variant": v, "seed": rl.seed, "episode": i + 1, "step": st,
                          "reward": float(a), "smoothed": float(b)}
                         for i, (st, a, b) in enumerate(zip(steps, rew, sm))]
        p = out / f"convergence_{band}.csv"
        write_csv(p, ["variant", "seed", "episode", "step", "reward", "smoothed"], rows)
        written.append(p)

    p = out / "theta.csv"
    write_csv(p, THETA_COLUMNS, theta_table(runs, fraction) if runs else [])
    written.append(p)
    return written
