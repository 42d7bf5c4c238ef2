"""Command-line entry point: dataset generation, training, evaluation,
strategy comparison, gradient checking, and SVG scene plots.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import strategies as qs
from .autodiff import Tensor, backward, finite_difference_check
from .boxes import giou_pairs
from .checkpoint import load_checkpoint
from .data import DatasetSpec, generate_dataset, load_dataset, render_scene, save_dataset
from .errors import ConfigError, NumericError, UsageError
from .evaluation import evaluate
from .model import ModelConfig, RankingHead, build_model
from .nn import LayerNorm
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    _coverage_positives,
    forward_losses,
    format_table,
    train,
)
from .viz import plot_queries

log = logging.getLogger("detlab")

STRATEGY_ALIASES = {"lp": "learnable_parameters", "two-stage": "two_stage", "raqg": "raqg"}
COMPARE_COLUMNS = ["strategy", "queries", "MR", "AP", "Recall"]


def _bool_flag(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 else "unknown"


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _manifest_path(out) -> Path:
    out = Path(out)
    if out.suffix:  # file target: keep the manifest alongside it
        return out.with_name(out.name + ".run.json")
    return out / "run_manifest.json"


def _start_manifest(command, args, outputs):
    """Record the run before any long work; rewritten on completion."""
    manifest = {
        "command": command,
        "config": str(args.config) if getattr(args, "config", None) else None,
        "seed": getattr(args, "seed", None),
        "git_describe": _git_describe(),
        "started": _now(),
        "finished": None,
        "outputs": [str(o) for o in outputs],
    }
    path = _manifest_path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(path, json.dumps(manifest, indent=2) + "\n")
    return path, manifest


def _finish_manifest(path, manifest):
    manifest["finished"] = _now()
    _write_atomic(path, json.dumps(manifest, indent=2) + "\n")


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"{what} not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{what} is not valid JSON: {path}: {err}") from err


# -- configuration assembly -------------------------------------------


def _train_setup(args):
    raw = {} if args.config is None else _load_json(args.config, "train config")
    model_kwargs = dict(raw.get("model", {}))
    train_kwargs = dict(raw.get("train", {}))
    strat_kwargs = dict(raw.get("strategy", {}))
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    if args.ranking_loss is not None:
        train_kwargs["ranking_loss"] = args.ranking_loss
    if args.strategy is not None:
        strat_kwargs["kind"] = STRATEGY_ALIASES[args.strategy]
    for flag in ("fixed_queries", "m", "removal"):
        value = getattr(args, flag)
        if value is not None:
            strat_kwargs[flag] = value
    strat_kwargs.setdefault("kind", "raqg")
    try:
        return (
            ModelConfig(**model_kwargs),
            TrainConfig(**train_kwargs),
            qs.QueryStrategy(**strat_kwargs),
        )
    except TypeError as err:
        raise ConfigError(f"bad config field: {err}") from err


def _load_run(run_dir, seed=None):
    """Rebuild the detector recorded in a training output directory."""
    run = Path(run_dir)
    raw = _load_json(run / "config.json", "run config")
    try:
        model_config = ModelConfig(**raw["model"])
        strategy = qs.QueryStrategy(**raw["strategy"])
    except (KeyError, TypeError) as err:
        raise ConfigError(f"run config is incomplete: {err}") from err
    if seed is None:
        seed = raw.get("train", {}).get("seed", 0)
    detector = build_model(model_config, strategy, seed)
    detector.load_state_dict(load_checkpoint(run / "checkpoint"))
    return detector, raw


def _strategy_label(raw_strategy: dict) -> str:
    kind = raw_strategy.get("kind", "?")
    if kind == "raqg":
        variant = "removal" if raw_strategy.get("removal", True) else "supplement"
        return f"raqg[{variant},m={raw_strategy.get('m')}]"
    return f"{kind}[K={raw_strategy.get('fixed_queries')}]"


# -- commands ----------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = _load_json(args.config, "dataset spec")
    if args.seed is not None:
        raw["seed"] = args.seed
    for key in ("object_count_range", "size_range", "crowd_level_range"):
        if key in raw:
            raw[key] = tuple(raw[key])
    try:
        spec = DatasetSpec(**raw)
    except TypeError as err:
        raise ConfigError(f"bad dataset spec field: {err}") from err

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest_path, manifest = _start_manifest("gen-data", args, [out])
    scenes = generate_dataset(spec)
    tmp = out.with_name(out.name + ".tmp")
    save_dataset(scenes, tmp)
    os.replace(tmp, out)

    counts = Counter(len(s.gt_boxes) for s in scenes)
    crowd = Counter(f"{round(s.crowd_level, 1):.1f}" for s in scenes)
    summary = {
        "n_images": len(scenes),
        "count_histogram": {str(k): counts[k] for k in sorted(counts)},
        "crowd_histogram": {k: crowd[k] for k in sorted(crowd)},
    }
    summary_path = out.with_name(out.name + ".summary.json")
    _write_atomic(summary_path, json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    _finish_manifest(manifest_path, manifest)
    return 0


def cmd_train(args) -> int:
    model_config, train_config, strategy = _train_setup(args)
    scenes = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path, manifest = _start_manifest("train", args, [out])
    result = train(scenes, model_config, train_config, strategy, out_dir=out)
    print(json.dumps(result.final_eval.to_dict()))
    _finish_manifest(manifest_path, manifest)
    return 0


def cmd_eval(args) -> int:
    detector, _ = _load_run(args.run, seed=args.seed)
    scenes = load_dataset(args.dataset)
    result = evaluate(detector, scenes)
    print(json.dumps(result.to_dict()))
    return 0


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise ConfigError("compare needs at least two runs")
    scenes = load_dataset(args.dataset)
    out = Path(args.out) if args.out else None
    manifest_ctx = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        manifest_ctx = _start_manifest("compare", args, [out])
    rows = []
    for run_dir in args.runs:
        detector, raw = _load_run(run_dir)
        result = evaluate(detector, scenes)
        rows.append(
            {
                "strategy": _strategy_label(raw.get("strategy", {})),
                "queries": result.mean_query_count,
                "MR": result.mr,
                "AP": result.ap,
                "Recall": result.recall,
            }
        )
    table = format_table(rows, COMPARE_COLUMNS)
    print(table)
    if out is not None:
        (out / "compare.txt").write_text(table + "\n")
        with open(out / "compare.csv", "w", newline="") as fh:
            writer = csv.writer(fh)  # strategy labels can contain commas
            writer.writerow(COMPARE_COLUMNS)
            for r in rows:
                writer.writerow([r[c] for c in COMPARE_COLUMNS])
        _finish_manifest(*manifest_ctx)
    return 0


def cmd_plot_queries(args) -> int:
    detector, _ = _load_run(args.run, seed=args.seed)
    scenes = load_dataset(args.dataset)
    by_id = {s.id: s for s in scenes}
    if args.scene not in by_id:
        raise ConfigError(f"scene id {args.scene} not in {args.dataset}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest_path, manifest = _start_manifest("plot-queries", args, [out])
    result = plot_queries(detector, by_id[args.scene], out)
    print(f"wrote {out} (X = {result.count})")
    _finish_manifest(manifest_path, manifest)
    return 0


# -- gradient checking -------------------------------------------------


def _sgl1_reference(y_star: float, y: float) -> float:
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    if y_star == y:
        return 0.0
    if y_star - y >= 0:
        return float(sig(1.0) - sig(y / max(y_star, 1e-8)))
    return float(sig(y_star / max(y, 1e-8)) - sig(1.0))


def _sgl1_check(grid=60, high=50.0):
    values = np.linspace(0.0, high, grid)
    worst = 0.0
    for y_star in values:
        for y in values:
            got = ls.sgl1_gradient(float(y_star), float(y))
            worst = max(worst, abs(got - _sgl1_reference(float(y_star), float(y))))
    return worst, ls.sgl1_gradient(2.0, 1.0)


def _whole_model_check(seed: int, eps=1e-5, n_params=4):
    """Finite differences of the full detection loss for a small model with
    learned queries (the one path with no stop-gradient boundaries)."""
    config = ModelConfig(
        image_size=16, patch_size=8, hidden_dim=8, embed_dim=8,
        heads=2, encoder_layers=1, decoder_layers=1, ffn_dim=16,
    )
    strategy = qs.QueryStrategy(kind="learnable_parameters", fixed_queries=3, x_max=4)
    detector = build_model(config, strategy, seed)
    spec = DatasetSpec(n_images=1, object_count_range=(2, 3), seed=seed)
    scene = generate_dataset(spec)[0]
    image = render_scene(scene, config.image_size)
    gt = scene.boxes_array()
    weights = ls.LossWeights()
    # The dense-objectness positive set is frozen at the unperturbed
    # anchors: the set is a discrete function of anchor positions, and a
    # flip under the finite-difference nudge would jump the loss.
    with ad.no_grad():
        frozen_cover = _coverage_positives(detector.lp_queries().anchor_array(), gt)

    def loss():
        total, _, _ = forward_losses(
            detector, image, gt, strategy, "sgl1", weights, aux_cover=frozen_cover
        )
        return total

    params = detector.parameters()
    for p in params:
        p.zero_grad()
    backward(loss())
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for p in rng.choice(len(params), size=min(n_params, len(params)), replace=False):
        param = params[p]
        flat = param.data.reshape(-1)
        idx = int(rng.integers(flat.size))
        keep = flat[idx]
        with ad.no_grad():
            flat[idx] = keep + eps
            hi = loss().item()
            flat[idx] = keep - eps
            lo = loss().item()
            flat[idx] = keep
        numeric = (hi - lo) / (2 * eps)
        analytic = param.grad.reshape(-1)[idx]
        scale = max(abs(numeric), abs(analytic), 1e-7)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def gradient_check_report(seed: int = 0):
    """(name, max_error, tolerance, passed) for every checked operation."""
    rng = np.random.default_rng(seed)
    x_val = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 3)))
    wt = Tensor(rng.normal(size=(3, 4)))
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    # kinked ops get inputs at least 0.2 from the kink
    off_val = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    # min/max compare against a tensor pushed ≥0.25 away elementwise, and the
    # clip probe moves values out of a band around the clip edges: an input
    # within eps of a selection boundary turns central differences one-sided
    sep = Tensor(wt.data + np.where(wt.data >= x_val, 0.25, -0.25))
    clip_val = 2.0 * off_val
    clip_val = np.where(np.abs(np.abs(clip_val) - 0.5) < 0.05, clip_val * 1.3, clip_val)
    gain, shift = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    idx = np.array([0, 2])
    # gt shifted into partial overlap so every pred corner binds somewhere;
    # strict containment would put some coordinates on a zero-gradient
    # plateau where central differences return only roundoff noise
    pred_probe = 1.0 / (1.0 + np.exp(-x_val))
    gt_boxes = np.column_stack(
        [
            pred_probe[:, 0] + 0.3 * pred_probe[:, 2],
            pred_probe[:, 1] + 0.3 * pred_probe[:, 3],
            0.8 * pred_probe[:, 2],
            1.2 * pred_probe[:, 3],
        ]
    )

    norm = LayerNorm(4)
    head = RankingHead(4, 2, rng)
    tokens_val = rng.normal(size=(5, 4))
    for scale in (1.0, 2.0, 4.0, 8.0, -1.0, -2.0, -4.0, -8.0):
        if head(Tensor(scale * tokens_val)).item() > 1e-6:
            tokens_val = scale * tokens_val
            break  # off the final ReLU's zero branch, so the check bites

    checks = [
        ("add", lambda t: (t + wt).sum(), x_val, 1e-4),
        ("sub", lambda t: (t - wt).sum(), x_val, 1e-4),
        ("mul", lambda t: (t * t).sum(), x_val, 1e-4),
        ("div", lambda t: (t / pos).sum(), x_val, 1e-4),
        ("neg", lambda t: (-t * wt).sum(), x_val, 1e-4),
        ("matmul", lambda t: (t @ w).sum(), x_val, 1e-4),
        ("relu", lambda t: ad.relu(t).sum(), off_val, 1e-4),
        ("sigmoid", lambda t: (ad.sigmoid(t) * wt).sum(), x_val, 1e-4),
        ("exp", lambda t: ad.exp(t).sum(), x_val, 1e-4),
        ("log", lambda t: ad.log(t).sum(), pos.data.copy(), 1e-4),
        ("abs", lambda t: ad.absolute(t).sum(), off_val, 1e-4),
        # cube probed away from 0, where its quadratic gradient would
        # vanish under the finite-difference truncation term
        ("power", lambda t: ad.power(t, 3.0).sum(), off_val, 1e-4),
        ("clip", lambda t: ad.clip(t, -0.5, 0.5).sum(), clip_val, 1e-4),
        ("minimum", lambda t: ad.minimum(t, sep).sum(), x_val, 1e-4),
        ("maximum", lambda t: ad.maximum(t, sep).sum(), x_val, 1e-4),
        ("softmax", lambda t: (ad.softmax(t, axis=-1) * wt).sum(), x_val, 1e-4),
        ("layer_norm", lambda t: (ad.layer_norm(t, gain, shift) * wt).sum(), x_val, 1e-4),
        ("sum", lambda t: (t * t).sum(axis=0).sum(), x_val, 1e-4),
        ("mean", lambda t: (t.mean(axis=1) * Tensor(np.arange(3.0))).sum(), x_val, 1e-4),
        ("take_rows", lambda t: (ad.take_rows(t, idx) * ad.take_rows(wt, idx)).sum(), x_val, 1e-4),
        ("concat", lambda t: (ad.concat([t, t * 2.0], axis=0)).sum(), x_val, 1e-4),
        ("transpose", lambda t: (t.T @ wt).sum(), x_val, 1e-4),
        ("reshape", lambda t: (t.reshape((4, 3)) * w).sum(), x_val, 1e-4),
        ("giou", lambda t: giou_pairs(ad.sigmoid(t), gt_boxes).sum(), x_val, 1e-4),
        ("layer_norm_module", lambda t: (norm(t) * wt).sum(), x_val, 1e-4),
        ("ranking_head", lambda t: head(t), tokens_val, 1e-4),
    ]
    entries = []
    for name, fn, value, tol in checks:
        err = finite_difference_check(fn, Tensor(np.array(value, dtype=np.float64)))
        entries.append((name, float(err), tol, err <= tol))

    err = _whole_model_check(seed)
    entries.append(("whole_model", float(err), 1e-3, err <= 1e-3))

    err, at_2_1 = _sgl1_check()
    entries.append(("sgl1_closed_form", float(err), 1e-12, err <= 1e-12))
    return entries, at_2_1


def cmd_grad_check(args) -> int:
    entries, at_2_1 = gradient_check_report(args.seed)
    width = max(len(name) for name, *_ in entries)
    print(f"gradient check (seed {args.seed})")
    for name, err, tol, passed in entries:
        note = f"  [gradient at (2,1) = {at_2_1:.7f}]" if name == "sgl1_closed_form" else ""
        print(f"  {name.ljust(width)}  max err {err:.3e}  tol {tol:g}  "
              f"{'ok' if passed else 'FAIL'}{note}")
    failed = [name for name, _, _, passed in entries if not passed]
    if failed:
        print(f"{len(failed)} of {len(entries)} checks failed: {', '.join(failed)}")
        return 1
    print(f"all {len(entries)} checks passed")
    return 0


# -- parser ------------------------------------------------------------


def _add_strategy_flags(parser):
    parser.add_argument("--strategy", choices=sorted(STRATEGY_ALIASES), default=None)
    parser.add_argument("--fixed-queries", dest="fixed_queries", type=int, default=None)
    parser.add_argument("--m", type=int, default=None)
    parser.add_argument("--removal", type=_bool_flag, default=None)
    parser.add_argument(
        "--ranking-loss", dest="ranking_loss", choices=ls.RANKING_LOSS_KINDS, default=None
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detlab",
        description="Adaptive-query detection laboratory on synthetic crowded scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--config", required=True, help="DatasetSpec JSON")
    gen.add_argument("--out", required=True, help="output JSONL path")
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a detector")
    tr.add_argument("--config", default=None, help="model/train/strategy JSON")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--seed", type=int, default=None)
    _add_strategy_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a training run")
    ev.add_argument("run", help="training output directory")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--seed", type=int, default=None)
    ev.set_defaults(func=cmd_eval)

    cp = sub.add_parser("compare", help="side-by-side strategy table")
    cp.add_argument("runs", nargs="+", help="two or more training output directories")
    cp.add_argument("--dataset", required=True)
    cp.add_argument("--out", default=None, help="directory for compare.{txt,csv}")
    cp.add_argument("--seed", type=int, default=None)
    cp.set_defaults(func=cmd_compare)

    gc = sub.add_parser("grad-check", help="finite-difference audit of every op")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_grad_check)

    pq = sub.add_parser("plot-queries", help="SVG overlay of queries and detections")
    pq.add_argument("run", help="training output directory")
    pq.add_argument("--dataset", required=True)
    pq.add_argument("--scene", type=int, default=0, help="scene id to draw")
    pq.add_argument("--out", required=True, help="output SVG path")
    pq.add_argument("--seed", type=int, default=None)
    pq.set_defaults(func=cmd_plot_queries)
    return parser


def _setup_logging():
    level = os.environ.get("DETLAB_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stdout,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (UsageError, NumericError, TrainingDiverged, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
