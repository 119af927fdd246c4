"""Command-line entry point: ``copnet <command> ...``.

Every command writes ``manifest.json`` next to its outputs; ``copnet replay
manifest.json`` re-runs it with the same arguments.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import __version__
from .closing import ClosingConfig, iterate_closing, parse_backend
from .labelling import LabelConfig, label_cells
from .metrics import cldice, interslice_cldice, mann_whitney_u, match_cells, nsd
from .pde import simulate_training_pair
from .perturb import DEFAULT_SEED, DegradeConfig
from .raster import (
    DEFAULT_SPACING,
    BinaryMask,
    Field2D,
    LabelMap,
    binarize,
    read_copf,
    read_pgm,
    write_copf,
    write_pgm,
)
from .synth import SynthConfig, voronoi_tissue

log = logging.getLogger("copnet")

METRIC_COLUMNS = ["labelled", "merged", "split", "nsd", "cldice"]
SIGNIFICANCE = 0.05


class SliceFailure(Exception):
    def __init__(self, failures):
        self.failures = failures
        super().__init__(f"{len(failures)} slice(s) failed")


# ---------------------------------------------------------------- helpers

def _ints(text: str) -> List[int]:
    return [int(t) for t in text.replace(" ", "").split(",") if t]


def _stem(path: str, suffixes=("_contours", "_gt", "_labels", "_degraded", "_closed")) -> str:
    s = Path(path).stem
    for suf in suffixes:
        if s.endswith(suf) and len(s) > len(suf):
            return s[: -len(suf)]
    return s


def default_jobs() -> int:
    return int(os.environ.get("COPNET_JOBS", "1"))


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map; results never depend on ``jobs``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _read_map(path: str, spacing: float) -> Field2D:
    if str(path).lower().endswith(".copf"):
        return read_copf(path)
    r = read_pgm(path)
    if isinstance(r, BinaryMask):
        return Field2D.from_mask(r, spacing)
    raise ValueError(f"{path}: expected a contour map, got a label map")


def _read_mask(path: str) -> BinaryMask:
    if str(path).lower().endswith(".copf"):
        return binarize(read_copf(path), 0.5)
    r = read_pgm(path)
    if isinstance(r, LabelMap):
        raise ValueError(f"{path}: expected a binary mask, got a label map")
    return r


def _read_labels(path: str) -> LabelMap:
    r = read_pgm(path)
    if isinstance(r, BinaryMask):
        # a 0/255 file is read as a mask; a single cell labelled 255 is unusual but valid
        return LabelMap(r.bits.astype(np.int64))
    return r


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _summary(values) -> str:
    v = np.asarray(values, dtype=float)
    return f"{v.mean():.6f}±{v.std():.6f}"


def degrade_config_from(args) -> DegradeConfig:
    return DegradeConfig(
        n_diffusion=args.n1,
        n_drop=args.n2,
        d_min=args.d_min,
        d_max=args.d_max,
        r_min=args.r_min,
        r_max=args.r_max,
        T=args.T,
        dt=args.dt,
        seed=args.seed,
        integer_radii=not args.continuous_radii,
        clamp_tents=not args.no_clamp_tents,
        conservative=not args.nonconservative,
    )


def closing_config_from(args) -> ClosingConfig:
    return ClosingConfig(
        convergence=args.convergence,
        max_iters=args.max_iters,
        threshold=args.threshold,
        backend=parse_backend(args.backend, args.timeout),
        sweep=getattr(args, "sweep", False),
    )


def label_config_from(args) -> LabelConfig:
    exclusion = _read_mask(args.exclusion) if getattr(args, "exclusion", None) else None
    return LabelConfig(args.label_threshold, args.connectivity, args.min_area, exclusion)


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> List[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SynthConfig(
        n_cells=args.cells,
        min_separation=args.min_separation,
        thickness=args.thickness,
        width=args.width,
        height=args.height,
        spacing=args.spacing,
        seed=args.seed,
    )
    written = []
    for i in range(args.slices):
        contours, cells = voronoi_tissue(cfg, i)
        stem = args.stem if args.slices == 1 else f"{args.stem}_{i:03d}"
        for suffix, raster in (("contours", contours), ("labels", cells)):
            path = out / f"{stem}_{suffix}.pgm"
            write_pgm(raster, path)
            written.append(path)
        print(f"{stem}: {cells.n_labels} cells")
    return written


# ---------------------------------------------------------------- simulate

def _simulate_one(task):
    path, rep, slice_index, cfg, spacing, out = task
    gt = _read_mask(path)
    degraded, _ = simulate_training_pair(gt, cfg, slice_index, rep, spacing)
    dst = Path(out) / f"{_stem(path)}_k{rep}_degraded.copf"
    write_copf(degraded, dst)
    return str(dst)


def cmd_simulate(args) -> List[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = degrade_config_from(args)
    written = []
    for path in args.gt:
        dst = out / f"{_stem(path)}_gt.pgm"
        write_pgm(_read_mask(path), dst)
        written.append(dst)
    tasks = [(p, k, i, cfg, args.spacing, str(out)) for i, p in enumerate(args.gt) for k in range(args.reps)]
    written += [Path(p) for p in _pmap(_simulate_one, tasks, args.jobs)]
    print(f"{len(tasks)} degraded maps from {len(args.gt)} slices x {args.reps} repetitions")
    return written


# ---------------------------------------------------------------- close

def _close_one(task):
    path, cfg, spacing, out, emit = task
    u0 = _read_map(path, spacing)
    stem = _stem(path)
    run = iterate_closing(u0, cfg, keep_maps=emit)
    written = []
    dst = Path(out) / f"{stem}_closed.copf"
    write_copf(run.final, dst)
    written.append(str(dst))
    hist = Path(out) / f"{stem}_history.csv"
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "modified_fraction"])
        for k, f in enumerate(run.history, 1):
            w.writerow([k, repr(f)])
    written.append(str(hist))
    if emit:
        for k, m in enumerate(run.maps):
            p = Path(out) / f"{stem}_it{k:02d}.copf"
            write_copf(m, p)
            written.append(str(p))
    return written, run.iterations, run.converged


def cmd_close(args) -> List[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = closing_config_from(args)
    tasks = [(p, cfg, args.spacing, str(out), args.emit_iterations) for p in args.maps]
    results = _pmap(_safe(_close_one), tasks, args.jobs)
    written, failures = [], []
    for path, res in zip(args.maps, results):
        if isinstance(res, Exception):
            failures.append((path, res))
            continue
        files, n_iter, converged = res
        written += [Path(f) for f in files]
        print(f"{_stem(path)}: {n_iter} iteration(s), {'converged' if converged else 'hit the cap'}")
    if failures:
        raise SliceFailure(failures)
    return written


class _safe:
    """Picklable wrapper that returns exceptions instead of raising them."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, task):
        try:
            return self.fn(task)
        except Exception as exc:  # reported per slice by the caller
            return exc


# ---------------------------------------------------------------- label

def cmd_label(args) -> List[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = label_config_from(args)
    written = []
    for path in args.maps:
        labels = label_cells(_read_map(path, args.spacing), cfg)
        dst = out / f"{_stem(path)}_labels.pgm"
        write_pgm(labels, dst)
        written.append(dst)
        print(f"{_stem(path)}: {labels.n_labels} cells")
    return written


# ---------------------------------------------------------------- evaluate

def evaluate_slices(pred_labels, gt_labels, pred_contours=None, gt_contours=None, tau=2.0, t_overlap=0.85, measure="iou"):
    rows = []
    for i, (pl, gl) in enumerate(zip(pred_labels, gt_labels)):
        rep = match_cells(pl, gl, t_overlap, measure)
        row = {"slice": i, "labelled": rep.labelled, "merged": rep.merged, "split": rep.split}
        if pred_contours is not None:
            row["nsd"] = nsd(pred_contours[i], gt_contours[i], tau)
            row["cldice"] = cldice(pred_contours[i], gt_contours[i])
        rows.append(row)
    return rows


def write_report(rows, fh, names=None, interslice=None) -> None:
    cols = [c for c in METRIC_COLUMNS if c in rows[0]]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["slice"] + cols)
    for k, r in enumerate(rows):
        w.writerow([names[k] if names else r["slice"]] + [_fmt(r[c]) for c in cols])
    w.writerow(["summary"] + [_summary([r[c] for r in rows]) for c in cols])
    if interslice is not None:
        mean, std = interslice
        w.writerow(["interslice_cldice"] + [""] * (len(cols) - 1) + [f"{mean:.6f}±{std:.6f}"])


def read_report(path, metric: str) -> List[float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r[metric]) for r in rows if r["slice"] not in ("summary", "interslice_cldice")]


def cmd_evaluate(args) -> List[Path]:
    if len(args.pred_labels) != len(args.gt_labels):
        raise ValueError(f"{len(args.pred_labels)} predicted vs {len(args.gt_labels)} ground-truth label maps")
    have_contours = bool(args.pred_contours or args.gt_contours)
    if have_contours and not (
        len(args.pred_contours or []) == len(args.gt_contours or []) == len(args.gt_labels)
    ):
        raise ValueError("contour lists must match the label lists in length")
    pred = [_read_labels(p) for p in args.pred_labels]
    gt = [_read_labels(p) for p in args.gt_labels]
    pc = [_read_mask(p) for p in args.pred_contours] if have_contours else None
    gc = [_read_mask(p) for p in args.gt_contours] if have_contours else None
    rows = evaluate_slices(pred, gt, pc, gc, args.tau, args.overlap, args.overlap_measure)
    inter = interslice_cldice(pc) if (args.interslice and pc and len(pc) >= 2) else None
    buf = io.StringIO()
    write_report(rows, buf, [_stem(p) for p in args.pred_labels], inter)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return [out]


# ---------------------------------------------------------------- stats

def cmd_stats(args) -> List[Path]:
    a = read_report(args.a, args.metric)
    b = read_report(args.b, args.metric)
    u, p = mann_whitney_u(a, b, args.alternative)
    sig = p < args.alpha
    line = f"metric={args.metric} alternative={args.alternative} U={u:.1f} p={p:.6g} significant={'yes' if sig else 'no'}"
    print(line)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(
            json.dumps(
                {"metric": args.metric, "alternative": args.alternative, "U": u, "p": p, "alpha": args.alpha, "significant": sig},
                indent=2,
            )
            + "\n"
        )
        return [out]
    return []


# ---------------------------------------------------------------- grid

def _grid_one(task):
    gt_contours, gt_cells, n1, n2, slice_index, rep, base, ccfg, lcfg, spacing, tau = task
    cfg = DegradeConfig(**{**asdict(base), "n_diffusion": n1, "n_drop": n2})
    degraded, _ = simulate_training_pair(gt_contours, cfg, slice_index, rep, spacing)
    run = iterate_closing(degraded, ccfg)
    pred = label_cells(run.final, lcfg)
    pred_contours = binarize(run.final, ccfg.threshold)
    return (
        match_cells(pred, gt_cells).labelled,
        nsd(pred_contours, gt_contours, tau),
        cldice(pred_contours, gt_contours),
    )


def cmd_grid(args) -> List[Path]:
    base = degrade_config_from(args)
    ccfg = closing_config_from(args)
    lcfg = label_config_from(args)
    if args.gt:
        stack = []
        for path in args.gt:
            contours = _read_mask(path)
            stack.append((contours, label_cells(Field2D.from_mask(contours, args.spacing), lcfg)))
    else:
        scfg = SynthConfig(
            n_cells=args.cells,
            thickness=args.thickness,
            width=args.width,
            height=args.height,
            spacing=args.spacing,
            seed=args.seed,
        )
        stack = [voronoi_tissue(scfg, i) for i in range(args.slices)]

    n1s, n2s = _ints(args.n1_values), _ints(args.n2_values)
    tasks = [
        (c, g, n1, n2, i, k, base, ccfg, lcfg, args.spacing, args.tau)
        for n1 in n1s
        for n2 in n2s
        for i, (c, g) in enumerate(stack)
        for k in range(args.reps)
    ]
    results = _pmap(_grid_one, tasks, args.jobs)

    per = len(stack) * args.reps
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n1", "n2", "labelled_mean", "labelled_std", "nsd_mean", "nsd_std", "cldice_mean", "cldice_std"])
    for j, (n1, n2) in enumerate((a, b) for a in n1s for b in n2s):
        block = np.array(results[j * per : (j + 1) * per])
        row = [n1, n2]
        for col in range(3):
            row += [_fmt(block[:, col].mean()), _fmt(block[:, col].std())]
        w.writerow(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return [out]


# ---------------------------------------------------------------- parser

def _add_degrade(p):
    d = DegradeConfig()
    g = p.add_argument_group("degradation")
    g.add_argument("--n1", type=int, default=d.n_diffusion, help="local diffusion sites")
    g.add_argument("--n2", type=int, default=d.n_drop, help="local drop sites")
    g.add_argument("--d-min", type=float, default=d.d_min, help="um^2/s")
    g.add_argument("--d-max", type=float, default=d.d_max, help="um^2/s")
    g.add_argument("--r-min", type=float, default=d.r_min, help="um")
    g.add_argument("--r-max", type=float, default=d.r_max, help="um")
    g.add_argument("--T", type=float, default=d.T, help="integration horizon (s)")
    g.add_argument("--dt", type=float, default=d.dt, help="time step (s)")
    g.add_argument("--continuous-radii", action="store_true")
    g.add_argument("--no-clamp-tents", action="store_true")
    g.add_argument("--nonconservative", action="store_true", help="alpha * laplacian instead of div(alpha grad)")


def _add_closing(p):
    c = ClosingConfig()
    g = p.add_argument_group("closing")
    g.add_argument("--backend", default="identity", help="identity | morphological[:R] | external:COMMAND")
    g.add_argument("--convergence", type=float, default=c.convergence)
    g.add_argument("--max-iters", type=int, default=c.max_iters)
    g.add_argument("--threshold", type=float, default=c.threshold)
    g.add_argument("--timeout", type=float, default=300.0, help="external backend timeout (s)")


def _add_label(p):
    lc = LabelConfig()
    g = p.add_argument_group("labelling")
    g.add_argument("--label-threshold", type=float, default=lc.threshold)
    g.add_argument("--connectivity", type=int, choices=(4, 8), default=lc.connectivity)
    g.add_argument("--min-area", type=int, default=lc.min_area)
    g.add_argument("--exclusion", help="PGM mask of excluded regions")


def _add_synth(p):
    s = SynthConfig()
    p.add_argument("--cells", type=int, default=s.n_cells)
    p.add_argument("--thickness", type=int, default=s.thickness)
    p.add_argument("--width", type=int, default=s.width)
    p.add_argument("--height", type=int, default=s.height)
    p.add_argument("--slices", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="copnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"copnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False):
        p.add_argument("--config", help="key=value file; command-line flags take precedence")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--spacing", type=float, default=DEFAULT_SPACING, help="um per pixel")
        if jobs:
            p.add_argument("--jobs", type=int, default=default_jobs())

    p = sub.add_parser("synth", help="generate synthetic Voronoi tissue")
    common(p)
    _add_synth(p)
    p.add_argument("--min-separation", type=float, default=None, help="um")
    p.add_argument("--stem", default="synth")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", help="degrade ground-truth contours with the PDE")
    common(p, jobs=True)
    p.add_argument("gt", nargs="+", help="ground-truth contour PGMs")
    p.add_argument("--reps", type=int, default=1)
    _add_degrade(p)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("close", help="iteratively close contour maps")
    common(p, jobs=True)
    p.add_argument("maps", nargs="+", help="COPF maps or PGM masks")
    _add_closing(p)
    p.add_argument("--emit-iterations", action="store_true", help="also write every intermediate map")
    p.add_argument("--sweep", action="store_true", help="run all --max-iters iterations regardless of convergence")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_close)

    p = sub.add_parser("label", help="connected-component cell labelling")
    common(p)
    p.add_argument("maps", nargs="+")
    _add_label(p)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("evaluate", help="per-slice metrics CSV")
    common(p)
    p.add_argument("--pred-labels", nargs="+", required=True)
    p.add_argument("--gt-labels", nargs="+", required=True)
    p.add_argument("--pred-contours", nargs="+")
    p.add_argument("--gt-contours", nargs="+")
    p.add_argument("--tau", type=float, default=2.0, help="NSD tolerance (px)")
    p.add_argument("--overlap", type=float, default=0.85)
    p.add_argument("--overlap-measure", choices=("iou", "gt"), default="iou")
    p.add_argument("--interslice", action="store_true", help="append consecutive-slice clDice")
    p.add_argument("--out", default="report.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="N1 x N2 degradation grid search")
    common(p, jobs=True)
    p.add_argument("gt", nargs="*", help="ground-truth contour PGMs (synthetic tissue if omitted)")
    p.add_argument("--n1-values", default="0,6,12")
    p.add_argument("--n2-values", default="0,10,20")
    p.add_argument("--reps", type=int, default=1)
    _add_synth(p)
    _add_degrade(p)
    _add_closing(p)
    _add_label(p)
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--out", default="grid.csv")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("stats", help="one-sided Mann-Whitney U between two reports")
    common(p)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--metric", default="labelled", choices=METRIC_COLUMNS)
    p.add_argument("--alternative", default="greater", choices=("greater", "less"))
    p.add_argument("--alpha", type=float, default=SIGNIFICANCE)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=None)
    return parser


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config(parser, argv, args):
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in read_config_file(args.config).items():
        action = actions.get(key)
        if action is None:
            raise ValueError(f"unknown config key {key!r} for {args.command}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = value  # string defaults go through the action's type
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _out_dir(args) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(".")
    return out if out.suffix == "" else out.parent


def _manifest_args(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "replay":
        manifest = json.loads(Path(args.manifest).read_text())
        return main(manifest["argv"])

    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        t0 = time.perf_counter()
        outputs = args.func(args)
        status = 0
    except SliceFailure as exc:
        for path, err in exc.failures:
            print(f"error: {path}: {err}", file=sys.stderr)
        outputs, status = [], 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    manifest = {
        "command": args.command,
        "argv": argv,
        "config": _manifest_args(args),
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in (getattr(args, "gt", None) or getattr(args, "maps", None) or [])],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "duration_s": round(time.perf_counter() - t0, 3),
        "status": status,
    }
    out_dir = _out_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
