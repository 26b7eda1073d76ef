"""Command-line entry point.

Subcommands: ``train``, ``evaluate``, ``cross-misreport``, ``distill``,
``baseline`` and ``heatmap``.  Failures print a single line
``error: <kind>: <message>`` to stderr; usage errors exit with status 2,
runtime failures with status 1.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .architectures import VARIANTS, build_network
from .auction import BASELINES, discrete_optimal_mechanism, monte_carlo_revenue
from .checkpoint import (CheckpointError, export_metrics, load_checkpoint, save_checkpoint,
                         state_from_bytes, state_to_bytes)
from .data import ASYMMETRIC_1x2, MultiSettingSpec, SettingSpec, resolve_source, seeded_stream
from .training import TrainConfig, init_state, train
from .validation import DistillConfig, cross_misreport_regret, distill, evaluate_mechanism

__all__ = [
    "main", "run", "UsageError", "load_config", "RunConfig", "manelli_vincent_boundaries",
    "heatmap_matrices", "CheckpointError", "save_checkpoint", "load_checkpoint",
    "state_to_bytes", "state_from_bytes", "export_metrics",
]

log = logging.getLogger("auctionnet")

OUT_DIR_ENV = "AUCTIONNET_OUT_DIR"

# keys that only make sense for one objective
_BUDGET_KEYS = {"gamma", "gamma_lr", "r_max_start", "r_max_end", "schedule_interval"}
_LAGRANGE_KEYS = {"lambda_init", "rho", "rho_lr", "update_period"}


class UsageError(Exception):
    """Bad flags or config: exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

class RunConfig:
    """Architecture, data source, train settings and output directory of one run."""

    RUN_KEYS = ("architecture", "setting", "out_dir", "seed", "desk", "padded", "use_pe",
                "pe_mode", "workers")

    def __init__(self, architecture="regretformer", setting="1x2", out_dir="runs/default",
                 seed=0, desk=False, padded=False, use_pe=False, pe_mode="features", workers=1,
                 train=None):
        if architecture not in VARIANTS:
            raise UsageError(f"unknown architecture {architecture!r}; choose from {', '.join(VARIANTS)}")
        if int(workers) != 1:
            raise UsageError("only single-worker runs are supported (workers = 1)")
        self.architecture = architecture
        self.setting = setting
        self.out_dir = os.environ.get(OUT_DIR_ENV) or out_dir
        self.seed = int(seed)
        self.desk = bool(desk)
        self.padded = bool(padded)
        self.use_pe = bool(use_pe)
        self.pe_mode = pe_mode
        self.workers = 1
        self.train = train or TrainConfig(seed=self.seed)

    def source(self):
        try:
            return resolve_source(self.setting)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.RUN_KEYS}
        d["train"] = self.train.to_dict()
        return d


def _coerce(kind, text: str):
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


_TRAIN_TYPES = {f.name: {"int": int, "float": float, "str": str, "bool": bool}[f.type]
                for f in fields(TrainConfig)}
_RUN_TYPES = {"architecture": str, "setting": str, "out_dir": str, "seed": int, "desk": bool,
              "padded": bool, "use_pe": bool, "pe_mode": str, "workers": int}


def _check_objective_keys(objective: str, given: set):
    stray = given & (_LAGRANGE_KEYS if objective == "budget" else _BUDGET_KEYS)
    if stray:
        raise UsageError(f"objective {objective!r} conflicts with {', '.join(sorted(stray))}")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a ``[run]`` / ``[train]`` INI file and apply flag overrides.

    Overrides use the same key names; flags win over the file.
    """
    run_kw: dict = {}
    train_kw: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise UsageError(f"missing config file {path}") from None
        except configparser.Error as exc:
            raise UsageError(f"malformed config {path}: {str(exc).splitlines()[0]}") from None
        for section in parser.sections():
            if section not in ("run", "train"):
                raise UsageError(f"malformed config {path}: unknown section [{section}]")
        for section, types, dest in (("run", _RUN_TYPES, run_kw), ("train", _TRAIN_TYPES, train_kw)):
            if not parser.has_section(section):
                continue
            for key, text in parser.items(section):
                if key not in types:
                    raise UsageError(f"malformed config {path}: unknown key {section}.{key}")
                try:
                    dest[key] = _coerce(types[key], text)
                except ValueError as exc:
                    raise UsageError(f"malformed config {path}: {section}.{key}: {exc}") from None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in _RUN_TYPES:
            run_kw[key] = value
        elif key in _TRAIN_TYPES:
            train_kw[key] = value
        else:
            raise UsageError(f"unknown option {key}")
    objective = train_kw.get("objective", "budget")
    _check_objective_keys(objective, set(train_kw))
    train_kw.setdefault("seed", run_kw.get("seed", 0))
    run_kw.setdefault("seed", train_kw["seed"])
    try:
        tc = TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training settings: {exc}") from None
    return RunConfig(train=tc, **run_kw)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _setting_meta(source) -> dict:
    if isinstance(source, MultiSettingSpec):
        return {"label": source.label, "settings": [_setting_meta(s) for s in source.settings]}
    return {"label": source.label, "n": source.n, "m": source.m, "lo": list(source.lo),
            "hi": list(source.hi)}


def _setting_from_meta(meta: dict):
    if "settings" in meta:
        return MultiSettingSpec(tuple(_setting_from_meta(s) for s in meta["settings"]), meta["label"])
    return SettingSpec(meta["n"], meta["m"], tuple(meta["lo"]), tuple(meta["hi"]), meta["label"])


def _single_setting(text: str) -> SettingSpec:
    try:
        source = resolve_source(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if isinstance(source, MultiSettingSpec):
        raise UsageError(f"{text!r} is a multi-setting; give one setting such as 2x3")
    return source


def _cmd_train(args) -> int:
    overrides = {
        "architecture": args.arch, "setting": args.setting, "out_dir": args.out, "seed": args.seed,
        "workers": args.workers, "outer_iterations": args.iterations, "batch_size": args.batch_size,
        "inner_steps_train": args.inner_steps, "inner_steps_valid": args.valid_steps,
        "objective": args.objective, "r_max_end": args.r_max_end, "r_max_start": args.r_max_start,
        "gamma": args.gamma, "gamma_lr": args.gamma_lr, "lambda_init": args.lambda_init,
        "rho": args.rho, "rho_lr": args.rho_lr, "val_every": args.val_every,
        "val_size": args.val_size, "precision": args.precision, "dataset_size": args.dataset_size,
        "schedule_interval": args.schedule_interval, "record_wall": args.wall or None,
        "checkpoint_every": args.checkpoint_every, "desk": args.desk or None,
        "use_pe": args.pe or None, "padded": args.padded or None,
    }
    cfg = load_config(args.config, overrides)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = cfg.source()
    meta = {"config": cfg.as_dict(), "setting": _setting_meta(source)}
    ckpt_path = out / "checkpoint.bin"

    def checkpoint(state):
        save_checkpoint(ckpt_path, state, **meta)

    resume = None
    if args.resume:
        resume, _ = load_checkpoint(args.resume)
        net = resume.net
    else:
        if isinstance(source, MultiSettingSpec):
            n, m = source.frame
            label = "multi"
        else:
            n, m, label = source.n, source.m, source.label
        net = build_network(cfg.architecture, n, m, seed=cfg.seed, padded=cfg.padded,
                            use_pe=cfg.use_pe, pe_mode=cfg.pe_mode, label=label, desk=cfg.desk)
    if args.stop_after is not None and args.stop_after < 1:
        raise UsageError("--stop-after must be >= 1")
    result = train(cfg.train, source, net, resume=resume, checkpoint_fn=checkpoint,
                   stop_after=args.stop_after)
    checkpoint(result.state)
    export_metrics(result.history, out / "metrics.csv")
    last = result.history[-1] if result.history else None
    summary = {"iterations": result.state.iteration, "train_ratio": result.train_ratio(),
               "revenue": last.revenue if last else math.nan,
               "regret_mean": last.regret_mean if last else math.nan}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_net(path):
    state, header = load_checkpoint(path)
    return state.net, header


def _cmd_evaluate(args) -> int:
    net, header = _load_net(args.checkpoint)
    setting = _single_setting(args.setting) if args.setting else _setting_from_meta(header["setting"])
    if isinstance(setting, MultiSettingSpec):
        raise UsageError("checkpoint was trained on a multi-setting; pass --setting")
    r_max = header.get("objective", {}).get("r_max", math.nan)
    report = evaluate_mechanism(net, setting, None, args.inner_steps, count=args.samples,
                                seed=args.seed, r_max=r_max)
    print(json.dumps(report.row(), sort_keys=True))
    return 0


def _cmd_cross(args) -> int:
    target, _ = _load_net(args.target)
    prober, _ = _load_net(args.prober)
    setting = _single_setting(args.setting)
    report = cross_misreport_regret(target, prober, setting, None, args.inner_steps,
                                    count=args.samples, seed=args.seed)
    print(json.dumps({"setting": setting.label, "regret_mean": report.regret_mean,
                      "regrets": report.regrets.tolist(), "negative": report.has_negative},
                     sort_keys=True))
    return 0


def _cmd_distill(args) -> int:
    teacher, header = _load_net(args.teacher)
    setting = _single_setting(args.setting) if args.setting else _setting_from_meta(header["setting"])
    student = build_network(args.student_arch, setting.n, setting.m, seed=args.seed,
                            label=setting.label, desk=args.desk)
    cfg = DistillConfig(iterations=args.iterations, batch_size=args.batch_size,
                        inner_steps=args.inner_steps, eval_size=args.samples,
                        eval_steps=args.valid_steps, seed=args.seed)
    student, report = distill(teacher, student, setting, cfg)
    out = Path(os.environ.get(OUT_DIR_ENV) or args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "student.bin", init_state(student, TrainConfig()),
                    setting=_setting_meta(setting))
    row = {"teacher_revenue": report.teacher_revenue, "student_revenue": report.student_revenue,
           "regret_table": report.regret_table, "aborted": report.aborted}
    (out / "distill.json").write_text(json.dumps(row, indent=2, sort_keys=True) + "\n")
    print(json.dumps(row, sort_keys=True))
    return 1 if report.aborted else 0


def _cmd_baseline(args) -> int:
    if args.mechanism not in BASELINES:
        raise UsageError(f"unknown mechanism {args.mechanism!r}; choose from {', '.join(BASELINES)}")
    setting = _single_setting(args.setting)
    mean, se = monte_carlo_revenue(args.mechanism, setting, args.samples, seeded_stream(args.seed))
    print(json.dumps({"mechanism": args.mechanism, "setting": setting.label, "revenue": mean,
                      "stderr": se, "samples": args.samples}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def manelli_vincent_boundaries() -> dict:
    """Region boundaries of the optimal 1x2 U[0,1] mechanism as polylines.

    Items sell separately at 2/3 and as a bundle at (4 - sqrt 2) / 3.
    """
    a = 2.0 / 3.0
    c = (2.0 - math.sqrt(2.0)) / 3.0
    return {
        "item1-only": [(a, 0.0), (a, c)],
        "item1-bundle": [(a, c), (1.0, c)],
        "bundle-price": [(a, c), (c, a)],
        "item2-only": [(0.0, a), (c, a)],
        "item2-bundle": [(c, a), (c, 1.0)],
    }


def lp_boundaries(setting: SettingSpec, points=(24, 12)) -> dict:
    """Level-change points of the LP-optimal allocation on a type grid, per item."""
    axes, z, _, _ = discrete_optimal_mechanism(setting.lo, setting.hi, points)
    out = {}
    for j in range(setting.m):
        level = np.round(2 * z[..., j]) / 2
        pts = []
        for a in range(len(axes[0])):
            for b in range(len(axes[1])):
                if a + 1 < len(axes[0]) and level[a, b] != level[a + 1, b]:
                    pts.append(((axes[0][a] + axes[0][a + 1]) / 2, axes[1][b]))
                if b + 1 < len(axes[1]) and level[a, b] != level[a, b + 1]:
                    pts.append((axes[0][a], (axes[1][b] + axes[1][b + 1]) / 2))
        out[f"item{j + 1}"] = pts
    return out


def heatmap_matrices(net, setting: SettingSpec, grid: int) -> tuple[np.ndarray, list]:
    """Allocation probability of each item over a (v1, v2) mesh; rows follow v1."""
    if (setting.n, setting.m) != (1, 2):
        raise UsageError(f"heatmaps need a 1x2 setting, got {setting.label}")
    if grid < 2:
        raise UsageError("grid must be >= 2")
    axes = [np.linspace(setting.lo[j], setting.hi[j], grid) for j in range(2)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 1, 2)
    with dc.no_grad():
        z = net.forward(dc.Tensor(mesh)).allocation.data[:, 0, :]
    return z.reshape(grid, grid, 2).transpose(2, 0, 1), axes


def _svg(matrix, axes, overlays, path):
    g = matrix.shape[0]
    size, pad = 320, 10
    cell = size / g
    sx = lambda x: pad + (x - axes[0][0]) / (axes[0][-1] - axes[0][0]) * size
    sy = lambda y: pad + size - (y - axes[1][0]) / (axes[1][-1] - axes[1][0]) * size
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad}" '
             f'height="{size + 2 * pad}">']
    for a in range(g):
        for b in range(g):
            shade = int(round(255 * (1 - float(matrix[a, b]))))
            parts.append(f'<rect x="{pad + a * cell:.2f}" y="{pad + size - (b + 1) * cell:.2f}" '
                         f'width="{cell:.2f}" height="{cell:.2f}" fill="rgb({shade},{shade},255)"/>')
    for pts in overlays.values():
        if len(pts) == 2:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="black" stroke-width="2"/>')
        else:
            parts.extend(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="1.5" fill="black"/>'
                         for x, y in pts)
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def _cmd_heatmap(args) -> int:
    net, header = _load_net(args.checkpoint)
    setting = _single_setting(args.setting) if args.setting else _setting_from_meta(header["setting"])
    z, axes = heatmap_matrices(net, setting, args.grid)
    out = Path(os.environ.get(OUT_DIR_ENV) or args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "grid.csv", np.stack(axes), delimiter=",", fmt="%.17g")
    for j in range(2):
        np.savetxt(out / f"alloc_item{j + 1}.csv", z[j], delimiter=",", fmt="%.17g")
    if setting.is_unit_uniform:
        overlays, kind = manelli_vincent_boundaries(), "manelli-vincent"
    elif setting == ASYMMETRIC_1x2 or (setting.lo, setting.hi) == (ASYMMETRIC_1x2.lo, ASYMMETRIC_1x2.hi):
        overlays, kind = lp_boundaries(setting), "daskalakis-lp"
    else:
        overlays, kind = {}, "none"
    with open(out / "boundaries.csv", "w") as fh:
        fh.write("segment,x,y\n")
        for name, pts in overlays.items():
            for x, y in pts:
                fh.write(f"{name},{x!r},{y!r}\n")
    # distance of each allocation probability from a deterministic 0/1 outcome
    deviation = [float(np.mean(np.minimum(z[j], 1 - z[j]))) for j in range(2)]
    summary = {"grid": args.grid, "overlay": kind, "mean_deviation_from_01": deviation}
    (out / "heatmap.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if args.svg:
        for j in range(2):
            _svg(z[j], axes, overlays, out / f"alloc_item{j + 1}.svg")
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="auctionnet", description="Neural auction design under a regret budget.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    t = sub.add_parser("train", help="train a mechanism network")
    t.add_argument("--config", help="INI file with [run] and [train] sections")
    t.add_argument("--arch", choices=VARIANTS)
    t.add_argument("--setting", help="e.g. 1x2, a preset (multi, multi-train, asym1x2) or a comma list")
    t.add_argument("--out", help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--inner-steps", type=int)
    t.add_argument("--valid-steps", type=int)
    t.add_argument("--val-every", type=int)
    t.add_argument("--val-size", type=int)
    t.add_argument("--dataset-size", type=int)
    t.add_argument("--objective", choices=("budget", "lagrangian"))
    t.add_argument("--r-max-start", type=float)
    t.add_argument("--r-max-end", type=float)
    t.add_argument("--schedule-interval", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--gamma-lr", type=float)
    t.add_argument("--lambda-init", type=float)
    t.add_argument("--rho", type=float)
    t.add_argument("--rho-lr", type=float)
    t.add_argument("--precision", choices=("float64", "float32"))
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="pause after this many iterations (resume later)")
    t.add_argument("--wall", action="store_true", help="record wall-clock ms in the metrics CSV")
    t.add_argument("--desk", action="store_true", help="halve the hidden widths")
    t.add_argument("--pe", action="store_true", help="RegretFormer positional encoding")
    t.add_argument("--padded", action="store_true", help="RegretNet zero-padding for multi-settings")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("evaluate", help="revenue and regret of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--setting")
    e.add_argument("--samples", type=int, default=4096)
    e.add_argument("--inner-steps", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_evaluate)

    c = sub.add_parser("cross-misreport", help="regret of one network at another's misreports")
    c.add_argument("--target", required=True)
    c.add_argument("--prober", required=True)
    c.add_argument("--setting", required=True)
    c.add_argument("--samples", type=int, default=4096)
    c.add_argument("--inner-steps", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_cross)

    d = sub.add_parser("distill", help="fit a student network to a teacher checkpoint")
    d.add_argument("--teacher", required=True)
    d.add_argument("--student-arch", required=True, choices=VARIANTS)
    d.add_argument("--setting")
    d.add_argument("--out", default="runs/distill")
    d.add_argument("--iterations", type=int, default=2000)
    d.add_argument("--batch-size", type=int, default=128)
    d.add_argument("--inner-steps", type=int, default=25)
    d.add_argument("--valid-steps", type=int, default=1000)
    d.add_argument("--samples", type=int, default=1024)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--desk", action="store_true")
    d.set_defaults(func=_cmd_distill)

    b = sub.add_parser("baseline", help="Monte-Carlo revenue of an analytic mechanism")
    b.add_argument("--mechanism", required=True)
    b.add_argument("--setting", required=True)
    b.add_argument("--samples", type=int, default=1_000_000)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=_cmd_baseline)

    h = sub.add_parser("heatmap", help="allocation heatmaps of a 1x2 checkpoint")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--setting")
    h.add_argument("--grid", type=int, default=51)
    h.add_argument("--out", default="runs/heatmap")
    h.add_argument("--svg", action="store_true")
    h.set_defaults(func=_cmd_heatmap)
    return p


def _one_line(exc: BaseException) -> str:
    text = " ".join(str(exc).split()) or exc.__class__.__name__
    return text


def run(argv=None) -> int:
    """Parse ``argv`` and run the subcommand; returns the exit status."""
    try:
        args = _parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: checkpoint: {_one_line(exc)}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError, FloatingPointError) as exc:
        print(f"error: {exc.__class__.__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
