"""Command line: ``mlo-ptrl run | compare | bridge-serve``."""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, metrics
from .bridge import BridgeEnv, BridgeError, bridge_serve
from .ptrl import (PROFILES, VARIANTS, PtrlConfig, PtrlTrainer, RunLog, LogRow, TrainingError,
                   variant_config)
from .vdn import TrainConfig
from .wlan import BandSpec, Scenario, WlanEnv, desk_scenario, load_scenario

log = logging.getLogger("mlo_ptrl")

MANIFEST_VERSION = 1


class UsageError(ValueError):
    pass


@dataclasses.dataclass
class ExperimentConfig:
    scenario: Scenario
    variants: list[str]
    seeds: list[int]
    train: TrainConfig
    ptrl: dict[str, PtrlConfig]
    out_dir: Path
    profile: str = "reference"
    bridge: str | None = None

    def __post_init__(self):
        if not self.variants:
            raise UsageError("at least one variant is required")
        if not self.seeds:
            raise UsageError("at least one seed is required")

    def manifest(self) -> dict:
        return {
            "manifest_version": MANIFEST_VERSION,
            "package_version": __version__,
            "profile": self.profile,
            "scenario": self.scenario.to_dict(),
            "train": self.train.to_dict(),
            "variants": {v: self.ptrl[v].to_dict() for v in self.variants},
            # the dict above gets key-sorted on disk; this keeps the user's order
            "variant_order": list(self.variants),
            "seeds": list(self.seeds),
        }


def _coerce(value: str, default, key: str):
    kind = type(default)
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return low in ("1", "true", "yes")
        if default is None:
            return None if value.lower() == "none" else int(value)
        return kind(value)
    except ValueError:
        raise UsageError(f"override {key}={value!r}: expected {kind.__name__}") from None


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def apply_overrides(overrides: dict[str, str], scenario: Scenario, train: dict, ptrl: dict):
    """Route each key to the scenario, training or transfer config; reject unknown keys."""
    tfields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    pfields = {f.name: f for f in dataclasses.fields(PtrlConfig)}
    scalar_sc = {"n_aps", "sta_min", "sta_max", "area_side_m", "default_walls", "seed"}
    bands = {b.band_id: b for b in scenario.bands}
    for key, raw in overrides.items():
        if key in tfields:
            default = train.get(key, tfields[key].default)
            train[key] = _coerce(raw, default, key)
        elif key in pfields:
            default = pfields[key].default
            ptrl[key] = _coerce(raw, default, key)
        elif key in scalar_sc:
            setattr(scenario, key, _coerce(raw, getattr(scenario, key), key))
        elif key.startswith("band.") and key.count(".") >= 2:
            bid, field = key[len("band."):].rsplit(".", 1)
            if bid not in bands or field not in BandSpec.__dataclass_fields__ or field == "band_id":
                raise UsageError(f"unknown override key {key!r}")
            bands[bid] = dataclasses.replace(bands[bid], **{field: _coerce(raw, getattr(bands[bid], field), key)})
        else:
            raise UsageError(f"unknown override key {key!r}")
    scenario.bands = [bands[b.band_id] for b in scenario.bands]


def resolve_scenario(spec: str | None) -> Scenario:
    if spec in (None, "default"):
        return Scenario()
    if spec == "desk":
        return desk_scenario()
    return load_scenario(spec)


def build_config(args) -> ExperimentConfig:
    if getattr(args, "manifest", None):
        m = json.loads(Path(args.manifest).read_text())
        if m.get("manifest_version") != MANIFEST_VERSION:
            raise UsageError(f"unsupported manifest version {m.get('manifest_version')!r}")
        return ExperimentConfig(
            scenario=Scenario.from_dict(m["scenario"]),
            variants=list(m.get("variant_order", m["variants"])),
            seeds=[int(s) for s in m["seeds"]],
            train=TrainConfig(**m["train"]),
            ptrl={v: PtrlConfig(**d) for v, d in m["variants"].items()},
            out_dir=Path(args.out_dir),
            profile=m.get("profile", "reference"),
            bridge=getattr(args, "bridge", None),
        )
    scenario = resolve_scenario(args.scenario)
    variants = args.variant or ["oVDN_g"]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    if args.profile not in PROFILES:
        raise UsageError(f"unknown profile {args.profile!r}")
    train = dict(PROFILES[args.profile])
    if args.steps is not None:
        train["total_steps"] = args.steps
    ptrl_over = {}
    apply_overrides(parse_overrides(args.set), scenario, train, ptrl_over)
    scenario.validate()
    return ExperimentConfig(
        scenario=scenario,
        variants=variants,
        seeds=args.seeds if args.seeds else [0],
        train=TrainConfig(**train),
        ptrl={v: variant_config(v, **ptrl_over) for v in variants},
        out_dir=Path(args.out_dir),
        profile=args.profile,
        bridge=getattr(args, "bridge", None),
    )


def make_env(cfg: ExperimentConfig):
    if cfg.bridge:
        host, _, port = cfg.bridge.rpartition(":")
        return BridgeEnv(host or "127.0.0.1", int(port))
    return WlanEnv(cfg.scenario)


def write_runlog(rl: RunLog, run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "log.csv").write_text(rl.rows_csv())
    for b in rl.band_ids:
        (run_dir / f"mcs_{b}.csv").write_text(rl.mcs_csv(b))
    meta = {"variant": rl.variant, "seed": rl.seed, "band_ids": rl.band_ids, "n_aps": rl.n_aps,
            "steps_done": rl.steps_done, "error": rl.error}
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_runlog(run_dir: Path) -> RunLog:
    meta = json.loads((run_dir / "run.json").read_text())
    rl = RunLog(meta["variant"], int(meta["seed"]), list(meta["band_ids"]), int(meta["n_aps"]),
                steps_done=int(meta["steps_done"]), error=meta.get("error"))
    lines = (run_dir / "log.csv").read_text().splitlines()[1:]
    for ln in lines:
        step, band, reward, loss, eps = ln.split(",")
        rl.rows.append(LogRow(int(step), band, float(reward), float(loss), float(eps)))
    for b in rl.band_ids:
        arr = np.loadtxt(run_dir / f"mcs_{b}.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        rl.mcs[b] = arr[:, 1:].astype(np.int8) if arr.size else np.zeros((0, rl.n_aps), np.int8)
    return rl


def run_dir_for(out_dir: Path, variant: str, seed: int) -> Path:
    return out_dir / "runs" / variant / f"seed_{seed}"


def execute(cfg: ExperimentConfig) -> dict[str, list[RunLog]]:
    """Train every (variant, seed), write run logs, checkpoints, metrics and manifest."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(cfg.manifest(), indent=2, sort_keys=True) + "\n")
    runs: dict[str, list[RunLog]] = {v: [] for v in cfg.variants}
    for v in cfg.variants:
        for s in cfg.seeds:
            env = make_env(cfg)
            try:
                trainer = PtrlTrainer(env, cfg.train, cfg.ptrl[v], s, v)
                try:
                    rl = trainer.run()
                except TrainingError as e:
                    write_runlog(e.partial_log, run_dir_for(out, v, s))
                    raise
            finally:
                if isinstance(env, BridgeEnv):
                    env.close()
            rdir = run_dir_for(out, v, s)
            write_runlog(rl, rdir)
            (rdir / "checkpoints").mkdir(exist_ok=True)
            trainer.save_checkpoints(rdir / "checkpoints")
            runs[v].append(rl)
            tail = rl.boundary_rewards()[-max(1, len(rl.rows) // (10 * len(rl.band_ids))):] if rl.rows else []
            log.info("%s seed %d: final reward %.3f", v, s, float(np.mean(tail)) if len(tail) else float("nan"))
    metrics.export(runs, out / "metrics", band_ids=cfg.scenario.band_ids)
    return runs


def compare_report(runs: dict[str, list[RunLog]]) -> list[dict]:
    """Aggregate Theta rows (team and pooled) for every unordered variant pair."""
    rows = metrics.theta_table(runs)
    return [r for r in rows if r["ap"] in metrics.SAMPLE_KINDS]


def format_report(rows: list[dict]) -> str:
    out = [f"{'X':>10} {'Y':>10} {'band':>5} {'samples':>7} {'theta':>8} {'spread':>7} {'pct':>7}  +/-"]
    for r in rows:
        out.append(f"{r['variant_x']:>10} {r['variant_y']:>10} {r['band']:>5} {r['ap']:>7} "
                   f"{r['theta']:8.3f} {r['theta_std']:7.3f} {r['theta_pct']:6.1f}%  {r['n_pos']}/{r['n_neg']}")
    return "\n".join(out)


def load_runs(out_dir: Path, variants=None) -> dict[str, list[RunLog]]:
    root = out_dir / "runs"
    if not root.is_dir():
        raise UsageError(f"{out_dir} has no runs/ directory")
    manifest = out_dir / "manifest.json"
    if variants:
        names = variants
    elif manifest.exists():
        m = json.loads(manifest.read_text())
        names = list(m.get("variant_order", m["variants"]))
    else:
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
    runs = {}
    for v in names:
        vdir = root / v
        if not vdir.is_dir():
            raise UsageError(f"no runs for variant {v!r} in {out_dir}")
        runs[v] = [read_runlog(d) for d in sorted(vdir.iterdir()) if (d / "run.json").exists()]
    return runs


def cmd_run(args) -> int:
    cfg = build_config(args)
    execute(cfg)
    print(f"wrote {cfg.out_dir}")
    return 0


def cmd_compare(args) -> int:
    if args.from_dir:
        runs = load_runs(Path(args.from_dir), args.variant)
    else:
        cfg = build_config(args)
        runs = execute(cfg)
    if len(runs) < 2:
        raise UsageError("compare needs at least two variants")
    rows = compare_report(runs)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(out / "compare.csv", metrics.THETA_COLUMNS, rows)
    print(format_report(rows))
    n_pairs = len(list(itertools.combinations(runs, 2)))
    print(f"{n_pairs} pairwise comparison(s)")
    return 0


def cmd_bridge(args) -> int:
    scenario = resolve_scenario(args.scenario)
    apply_overrides(parse_overrides(args.set), scenario, {}, {})
    bridge_serve(args.port, scenario, args.host)
    return 0


def _add_run_args(p):
    p.add_argument("--scenario", help="scenario JSON file, or 'default' / 'desk'")
    p.add_argument("--variant", action="append", choices=sorted(VARIANTS), help="repeatable")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--steps", type=int, help="total environment steps")
    p.add_argument("--profile", default="reference", choices=sorted(PROFILES))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--manifest", help="re-run exactly what a previous manifest.json describes")
    p.add_argument("--bridge", metavar="HOST:PORT", help="use a bridge server instead of the built-in simulator")


def build_parser():
    ap = argparse.ArgumentParser(prog="mlo-ptrl", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="train variants and export metrics")
    _add_run_args(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", help="pairwise Theta gains between variants")
    _add_run_args(p)
    p.add_argument("--from-dir", help="read runs from a previous 'run' output directory")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("bridge-serve", help="serve the built-in simulator over TCP")
    p.add_argument("--port", type=int, default=5555)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--scenario")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_bridge)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MLO_PTRL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as e:  # UsageError, ConfigError, ScenarioError, bad config values
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingError, BridgeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
