"""Command-line experiment runner: multi-seed sweeps over distribution
modes and algorithms, CSV metrics, learning-curve SVGs, and summary stats.

Subcommands:
    relodkit run -c scenario.cfg [-o outdir] [--set key=value]...
    relodkit plot outdir
    relodkit compare outdir
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .core import MetricRecord, read_metrics_csv, write_metrics_csv
from .orchestrator import build_topology
from .ppo import PpoConfig
from .sac import SacConfig
from .transport import Jitter, LinkModel

SMOOTHING_DEFAULT = 20  # trailing moving-average window, episodes
FINAL_FRACTION = 0.10  # "final return" = mean over the last 10% of episodes

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

SCALAR_KEYS = {
    "name", "task", "seed", "seeds", "total_steps", "smoothing", "k",
    "mode", "algo", "clock.mode",
    "compute.local", "compute.remote",
    "link.preset", "link.base_ms", "link.jitter", "link.drop_rate",
    "sac.buffer_capacity", "sac.minibatch", "sac.alpha", "sac.lr",
    "sac.reward_scale", "sac.tau", "sac.init_random_steps", "sac.hidden",
    "sac.throttle",
    "ppo.horizon", "ppo.epochs", "ppo.minibatch", "ppo.clip", "ppo.lr",
}
ARM_KEYS = {"mode", "algo", "local", "remote", "link"}


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int = 0):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line


@dataclass
class Arm:
    name: str
    mode: str
    algo: str
    local: str = "laptop"
    remote: str = "workstation"
    link: str = "none"


@dataclass
class Scenario:
    name: str
    task: str = "pixel_reacher"
    arms: list = field(default_factory=list)
    base_seed: int = 0
    seeds: int = 5
    total_steps: int = 2000
    smoothing: int = SMOOTHING_DEFAULT
    k: int | None = None
    clock_mode: str = "virtual"
    options: dict = field(default_factory=dict)  # remaining dotted keys

    def validate(self) -> None:
        if not self.arms:
            raise ConfigError("scenario needs at least one arm")
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")


def _parse_arm(value: str, line: int) -> Arm:
    parts = value.split()
    if not parts:
        raise ConfigError("empty arm definition", line)
    fields = {}
    for tok in parts[1:]:
        if "=" not in tok:
            raise ConfigError(f"arm field {tok!r} is not key=value", line)
        key, _, val = tok.partition("=")
        if key not in ARM_KEYS:
            raise ConfigError(f"unknown arm field {key!r}", line)
        fields[key] = val
    if "mode" not in fields or "algo" not in fields:
        raise ConfigError("arm needs mode= and algo=", line)
    return Arm(name=parts[0], **fields)


def parse_config(path: str, overrides: list[str] | None = None) -> Scenario:
    """Flat key = value file; returns a validated Scenario. Unknown keys are
    errors with a line number. CLI overrides beat file values; the
    RELODKIT_SEED environment variable is the lowest-precedence seed."""
    values: dict[str, str] = {}
    arms: list[Arm] = []
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}")
    for i, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"not a key = value line: {raw.strip()!r}", i)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "arm":
            arms.append(_parse_arm(value, i))
        elif key in SCALAR_KEYS:
            values[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}", i)
    for ov in overrides or []:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        key, _, value = ov.partition("=")
        key, value = key.strip(), value.strip()
        if key == "arm":
            arms.append(_parse_arm(value, 0))
        elif key in SCALAR_KEYS:
            values[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    if "seed" not in values and os.environ.get("RELODKIT_SEED"):
        values["seed"] = os.environ["RELODKIT_SEED"]

    name = values.pop("name", os.path.splitext(os.path.basename(path))[0])
    sc = Scenario(name=name)
    sc.task = values.pop("task", sc.task)
    try:
        sc.base_seed = int(values.pop("seed", sc.base_seed))
        sc.seeds = int(values.pop("seeds", sc.seeds))
        sc.total_steps = int(values.pop("total_steps", sc.total_steps))
        sc.smoothing = int(values.pop("smoothing", sc.smoothing))
        if "k" in values:
            sc.k = int(values.pop("k"))
    except ValueError as e:
        raise ConfigError(f"bad integer value: {e}")
    sc.clock_mode = values.pop("clock.mode", sc.clock_mode)
    if not arms and "mode" in values and "algo" in values:
        arms.append(
            Arm(
                name="main",
                mode=values.pop("mode"),
                algo=values.pop("algo"),
                local=values.pop("compute.local", "laptop"),
                remote=values.pop("compute.remote", "workstation"),
                link=values.pop("link.preset", "none"),
            )
        )
    sc.arms = arms
    sc.options = values
    sc.validate()
    return sc


def _build_link(arm: Arm, opts: dict) -> str | LinkModel:
    if arm.link != "custom":
        return arm.link
    base_ns = int(float(opts.get("link.base_ms", "0")) * 1e6)
    jitter = Jitter()
    spec = opts.get("link.jitter", "none")
    if spec != "none":
        kind, *params = spec.split(":")
        if kind not in ("uniform", "normal") or len(params) != 2:
            raise ConfigError(f"bad link.jitter spec {spec!r}")
        jitter = Jitter(kind, float(params[0]) * 1e6, float(params[1]) * 1e6)
    return LinkModel(base_delay_ns=base_ns, jitter=jitter, drop_rate=float(opts.get("link.drop_rate", "0")))


def _build_sac_cfg(opts: dict) -> SacConfig:
    kw = {}
    if "sac.buffer_capacity" in opts:
        kw["buffer_capacity"] = int(opts["sac.buffer_capacity"])
    if "sac.minibatch" in opts:
        kw["minibatch_size"] = int(opts["sac.minibatch"])
    if "sac.alpha" in opts:
        kw["alpha"] = float(opts["sac.alpha"])
    if "sac.lr" in opts:
        kw["learning_rate"] = float(opts["sac.lr"])
    if "sac.reward_scale" in opts:
        kw["reward_scale"] = float(opts["sac.reward_scale"])
    if "sac.tau" in opts:
        kw["tau"] = float(opts["sac.tau"])
    if "sac.init_random_steps" in opts:
        kw["init_random_steps"] = int(opts["sac.init_random_steps"])
    if "sac.hidden" in opts:
        kw["hidden"] = tuple(int(x) for x in opts["sac.hidden"].split(":"))
    return SacConfig(**kw)


def _build_ppo_cfg(opts: dict) -> PpoConfig:
    kw = {}
    if "ppo.horizon" in opts:
        kw["horizon"] = int(opts["ppo.horizon"])
    if "ppo.epochs" in opts:
        kw["epochs"] = int(opts["ppo.epochs"])
    if "ppo.minibatch" in opts:
        kw["minibatch_size"] = int(opts["ppo.minibatch"])
    if "ppo.clip" in opts:
        kw["clip_eps"] = float(opts["ppo.clip"])
    if "ppo.lr" in opts:
        kw["learning_rate"] = float(opts["ppo.lr"])
    return PpoConfig(**kw)


def execute_scenario(sc: Scenario, outdir: str) -> list[str]:
    """Run every (arm, seed) pair; one CSV + one meta JSON per run."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    sac_cfg = _build_sac_cfg(sc.options)
    ppo_cfg = _build_ppo_cfg(sc.options)
    for arm in sc.arms:
        for i in range(sc.seeds):
            seed = sc.base_seed + i
            engine = build_topology(
                mode=arm.mode,
                algo=arm.algo,
                task=sc.task,
                local_compute=_maybe_throttled(arm.local, sc.options),
                remote_compute=_maybe_throttled(arm.remote, sc.options),
                link=_build_link(arm, sc.options),
                seed=seed,
                k=sc.k,
                sac_cfg=sac_cfg,
                ppo_cfg=ppo_cfg,
                run_id=f"{sc.name}_{arm.name}_{seed}",
            )
            path = os.path.join(outdir, f"{sc.name}_{arm.name}_{seed}.csv")
            try:
                records = engine.run(sc.total_steps, sc.clock_mode)
            except Exception:
                if engine.records:  # keep partial metrics on abort
                    write_metrics_csv(path, engine.records)
                raise
            write_metrics_csv(path, records)
            with open(os.path.join(outdir, f"{sc.name}_{arm.name}_{seed}.meta.json"), "w") as f:
                json.dump(engine.meta, f, indent=2, sort_keys=True)
            written.append(path)
    return written


def _maybe_throttled(preset: str, opts: dict):
    """Apply a sac.throttle option ("back_to_back" or "every_n_steps:N") on
    top of a compute preset."""
    from .orchestrator import compute_preset
    from .sac import UpdateThrottle

    model = compute_preset(preset)
    spec = opts.get("sac.throttle")
    if spec and preset != "jetson_emulated":  # the jetson preset pins its own
        if spec == "back_to_back":
            model.throttle = UpdateThrottle("back_to_back")
        else:
            kind, _, n = spec.partition(":")
            if kind != "every_n_steps" or not n.isdigit():
                raise ConfigError(f"bad sac.throttle spec {spec!r}")
            model.throttle = UpdateThrottle("every_n_steps", int(n))
    return model


# -- aggregation -------------------------------------------------------------


def _group_runs(outdir: str) -> dict[str, list[list[MetricRecord]]]:
    """Map arm name -> list of per-seed record lists, read from the CSVs."""
    groups: dict[str, list] = {}
    for fname in sorted(os.listdir(outdir)):
        if not fname.endswith(".csv") or fname == "summary.csv":
            continue
        records = read_metrics_csv(os.path.join(outdir, fname))
        if not records:
            print(f"warning: {fname} is empty, skipped", file=sys.stderr)
            continue
        arm = fname[:-4].rsplit("_", 1)[0]
        groups.setdefault(arm, []).append(records)
    return groups


def final_return(records: list[MetricRecord]) -> float:
    n = max(1, int(math.ceil(len(records) * FINAL_FRACTION)))
    return float(np.mean([r.episodic_return for r in records[-n:]]))


def smooth(values, window: int):
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(values[lo : i + 1])))
    return out


@dataclass
class ArmSummary:
    arm: str
    final_mean: float
    final_stderr: float
    missed_rate: float
    mean_staleness: float
    runs: int


def summarize(outdir: str) -> list[ArmSummary]:
    groups = _group_runs(outdir)
    out = []
    for arm in groups:
        runs = groups[arm]
        lengths = {len(r) for r in runs}
        if len(lengths) > 1:
            print(f"warning: {arm}: unequal run lengths {sorted(lengths)}, comparing common prefix", file=sys.stderr)
            prefix = min(lengths)
            runs = [r[:prefix] for r in runs]
        finals = [final_return(r) for r in runs]
        missed = [sum(rec.missed_deadlines for rec in r) / max(1, sum(rec.episode_length_steps for rec in r)) for r in runs]
        staleness = _mean_staleness(outdir, arm)
        stderr = float(np.std(finals, ddof=1) / math.sqrt(len(finals))) if len(finals) > 1 else 0.0
        out.append(
            ArmSummary(
                arm=arm,
                final_mean=float(np.mean(finals)),
                final_stderr=stderr,
                missed_rate=float(np.mean(missed)),
                mean_staleness=staleness,
                runs=len(runs),
            )
        )
    return out


def _mean_staleness(outdir: str, arm: str) -> float:
    vals = []
    for fname in os.listdir(outdir):
        if fname.endswith(".meta.json") and fname[: -len(".meta.json")].rsplit("_", 1)[0] == arm:
            with open(os.path.join(outdir, fname)) as f:
                vals.append(json.load(f).get("mean_staleness", 0.0))
    return float(np.mean(vals)) if vals else 0.0


# -- plotting -----------------------------------------------------------------


def render_svg(outdir: str, smoothing: int = SMOOTHING_DEFAULT) -> str:
    """Learning curves: x = cumulative experience time (s), y = smoothed
    episodic return; thin per-seed paths plus one wide mean path per arm."""
    groups = _group_runs(outdir)
    if not groups:
        raise ConfigError("no CSV runs found to plot")
    width, height = 800, 500
    ml, mr, mt, mb = 60, 20, 30, 45
    x_max = max(r[-1].real_experience_time_s for runs in groups.values() for r in runs)
    all_y = []
    curves = {}  # arm -> (list of (xs, ys), mean_curve)
    for arm, runs in groups.items():
        per_seed = []
        for records in runs:
            xs = [rec.real_experience_time_s for rec in records]
            ys = smooth([rec.episodic_return for rec in records], smoothing)
            per_seed.append((xs, ys))
            all_y.extend(ys)
        prefix = min(len(xs) for xs, _ in per_seed)
        mean_x = [float(np.mean([c[0][i] for c in per_seed])) for i in range(prefix)]
        mean_y = [float(np.mean([c[1][i] for c in per_seed])) for i in range(prefix)]
        curves[arm] = (per_seed, (mean_x, mean_y))
    y_lo, y_hi = min(all_y), max(all_y)
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    x_hi = x_max if x_max > 0 else 1.0

    def sx(x):
        return ml + (width - ml - mr) * (x / x_hi)

    def sy(y):
        return height - mb - (height - mt - mb) * ((y - y_lo) / (y_hi - y_lo))

    def path(xs, ys, cls, color, w):
        if len(xs) == 1:  # degenerate single point: short flat mark
            x, y = sx(xs[0]), sy(ys[0])
            d = f"M {x - 3:.1f} {y:.1f} L {x + 3:.1f} {y:.1f}"
        else:
            d = "M " + " L ".join(f"{sx(x):.1f} {sy(y):.1f}" for x, y in zip(xs, ys))
        return f'<path class="{cls}" d="{d}" fill="none" stroke="{color}" stroke-width="{w}" stroke-opacity="{0.35 if cls == "seed" else 1.0}"/>'

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = frac * x_hi
        parts.append(f'<text x="{sx(xv):.0f}" y="{height - mb + 18}" font-size="11" text-anchor="middle">{xv:.0f}</text>')
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<text x="{ml - 8}" y="{sy(yv) + 4:.0f}" font-size="11" text-anchor="end">{yv:.0f}</text>')
    parts.append(f'<text x="{(ml + width - mr) / 2:.0f}" y="{height - 8}" font-size="12" text-anchor="middle">experience time (s)</text>')
    parts.append(f'<text x="14" y="{(mt + height - mb) / 2:.0f}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {(mt + height - mb) / 2:.0f})">episodic return</text>')
    for i, arm in enumerate(sorted(curves)):
        color = _PALETTE[i % len(_PALETTE)]
        per_seed, (mx, my) = curves[arm]
        for xs, ys in per_seed:
            parts.append(path(xs, ys, "seed", color, 1.0))
        parts.append(path(mx, my, "mean", color, 3.0))
        parts.append(f'<text x="{width - mr - 10}" y="{mt + 16 * (i + 1)}" font-size="12" text-anchor="end" fill="{color}">{arm}</text>')
    parts.append("</svg>")
    svg = "\n".join(parts)
    out_path = os.path.join(outdir, "learning_curves.svg")
    with open(out_path, "w") as f:
        f.write(svg)
    return out_path


# -- commands -----------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        sc = parse_config(args.config, args.set or [])
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    outdir = args.outdir or sc.name
    try:
        written = execute_scenario(sc, outdir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"run aborted: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(written)} runs to {outdir}")
    return 0


def cmd_plot(args) -> int:
    try:
        path = render_svg(args.outdir, args.smoothing)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(path)
    return 0


def cmd_compare(args) -> int:
    summaries = summarize(args.outdir)
    if not summaries:
        print("error: no runs found", file=sys.stderr)
        return 2
    best = max(s.final_mean for s in summaries)
    header = f"{'arm':<40} {'final':>10} {'stderr':>8} {'missed%':>8} {'stale':>7} {'ratio':>6}"
    lines = [header, "-" * len(header)]
    rows = []
    for s in summaries:
        ratio = s.final_mean / best if best != 0 else float("nan")
        lines.append(
            f"{s.arm:<40} {s.final_mean:>10.2f} {s.final_stderr:>8.2f} "
            f"{100 * s.missed_rate:>7.2f}% {s.mean_staleness:>7.2f} {ratio:>6.2f}"
        )
        rows.append((s.arm, s.final_mean, s.final_stderr, s.missed_rate, s.mean_staleness, ratio))
    text = "\n".join(lines)
    print(text)
    with open(os.path.join(args.outdir, "summary.csv"), "w") as f:
        f.write("arm,final_mean,final_stderr,missed_rate,mean_staleness,ratio_to_best\n")
        for r in rows:
            f.write(f"{r[0]},{r[1]!r},{r[2]!r},{r[3]!r},{r[4]!r},{r[5]!r}\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="relodkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a scenario config")
    p_run.add_argument("-c", "--config", required=True)
    p_run.add_argument("-o", "--outdir", default=None)
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_run.set_defaults(fn=cmd_run)
    p_plot = sub.add_parser("plot", help="render learning-curve SVG from a run directory")
    p_plot.add_argument("outdir")
    p_plot.add_argument("--smoothing", type=int, default=SMOOTHING_DEFAULT)
    p_plot.set_defaults(fn=cmd_plot)
    p_cmp = sub.add_parser("compare", help="summary table from a run directory")
    p_cmp.add_argument("outdir")
    p_cmp.set_defaults(fn=cmd_compare)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
