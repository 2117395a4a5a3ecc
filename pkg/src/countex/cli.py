"""Command line entry points.

Exit codes: 0 success, 2 for configuration or input validation problems,
3 for numerical failures (non-finite losses, gradient checks out of
tolerance).  Every command prints its resolved configuration up front and
drops a checksum manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import kernels
from .config import (
    ABLATION_MASKS,
    CountexConfig,
    describe,
    load_config,
    mask_label,
    parse_mask,
    split_counts,
)
from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    CountexError,
    NonFiniteLossError,
    SceneFormatError,
)
from .gradcheck import format_rows, run_gradient_suite
from .manifest import write_manifest
from .model import CountModel
from .protocols import run_irrelevant_negative, run_modality_ablation, run_swap_test
from .reports import (
    write_curve_csv,
    write_eval_csv,
    write_per_scene_csv,
    write_predictions_csv,
)
from .scenes import CategoryUniverse, generate_scene, read_scene, write_scene
from .svgplots import bar_chart, line_plot, scatter_plot
from .training import evaluate, prediction_rows, train
from .autograd import RngStream


def _add_common(sub: argparse.ArgumentParser, data: bool = True) -> None:
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--threads", type=int, help="worker threads (or COUNTEX_THREADS)")
    if data:
        sub.add_argument("--data", required=True, help="dataset directory from `generate`")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="countex",
        description="prompt-conditioned counting on synthetic confusable scenes",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="write a scene dataset with train/val/test splits")
    _add_common(p, data=False)
    p.add_argument("--count", type=int, default=100, help="total number of scenes")

    p = subs.add_parser("train", help="train a model and calibrate its threshold")
    _add_common(p)

    p = subs.add_parser("eval", help="evaluate a trained model on the test split")
    _add_common(p)
    p.add_argument("--params", required=True, help="trained parameter bundle")
    p.add_argument("--mask", help="modality mask, e.g. t_pos+t_neg")

    p = subs.add_parser("ablate", help="prompt-modality and negative-relevance sweeps")
    _add_common(p)
    p.add_argument("--params", help="trained bundle; omitted trains fresh")

    p = subs.add_parser("swap", help="swap positive and negative prompts on the test split")
    _add_common(p)
    p.add_argument("--params", required=True, help="trained parameter bundle")
    p.add_argument("--mask", help="modality mask, e.g. t_pos+t_neg")

    p = subs.add_parser("gradcheck", help="finite-difference check of every operation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=20, help="random points per operation")
    return parser


def _resolve_threads(args) -> int | None:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("COUNTEX_THREADS", "").strip()
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"COUNTEX_THREADS must be an integer, got {env!r}") from exc
    return None


def _load_cfg(args) -> CountexConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = load_config(getattr(args, "config", None), overrides)
    print(describe(cfg))
    return cfg


def _load_split(data_dir: str, split: str):
    base = Path(data_dir) / split
    if not base.is_dir():
        raise ConfigError(f"dataset split directory missing: {base}")
    paths = sorted(base.glob("*.json"))
    if not paths:
        raise ConfigError(f"no scene files under {base}")
    return [read_scene(p) for p in paths]


def _prepare_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    if args.count < 0:
        raise ConfigError(f"--count must be nonnegative, got {args.count}")
    out = _prepare_out(args.out)
    n_train, n_val, n_test = split_counts(
        args.count, (cfg.split_train, cfg.split_val, cfg.split_test)
    )
    universe = CategoryUniverse.from_config(cfg)
    files = []
    index = 0
    for split, quota in (("train", n_train), ("val", n_val), ("test", n_test)):
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        for _ in range(quota):
            scene_id = f"scene-{index:05d}"
            scene = generate_scene(
                cfg,
                RngStream(cfg.seed, f"dataset/{index:05d}"),
                universe=universe,
                scene_id=scene_id,
            )
            rel = f"{split}/{scene_id}.json"
            write_scene(scene, out / rel)
            files.append(rel)
            index += 1
    write_manifest(out, "generate", cfg.seed, args.config, files)
    print(f"wrote {args.count} scenes ({n_train}/{n_val}/{n_test}) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    threads = _resolve_threads(args)
    kernels.set_threads(threads)
    out = _prepare_out(args.out)
    train_scenes = _load_split(args.data, "train")
    val_scenes = _load_split(args.data, "val")
    result = train(cfg, train_scenes, val_scenes, cfg.seed)
    result.model.save(out / "params.json", result.tau)
    write_curve_csv(result.curve, out / "loss_curve.csv")
    if result.curve:
        line_plot(
            out / "loss_curve.svg",
            {
                "L_cls": [r.cls for r in result.curve],
                "L_loc": [r.loc for r in result.curve],
                "L_den": [r.den for r in result.curve],
                "L_share": [r.share for r in result.curve],
                "L_div": [r.div for r in result.curve],
                "total": [r.total for r in result.curve],
            },
            title="training loss terms",
            x_label="step",
        )
        files = ["params.json", "loss_curve.csv", "loss_curve.svg"]
    else:
        files = ["params.json", "loss_curve.csv"]
    write_manifest(out, "train", cfg.seed, args.config, files)
    final = result.curve[-1].total if result.curve else float("nan")
    print(f"trained {cfg.steps} steps; tau={result.tau:.2f}; final loss {final:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    threads = _resolve_threads(args)
    kernels.set_threads(threads)
    out = _prepare_out(args.out)
    model, tau = CountModel.load(args.params)
    mask = parse_mask(args.mask) if args.mask else parse_mask(model.cfg.eval_mask)
    scenes = _load_split(args.data, "test")
    report = evaluate(model, scenes, tau, mask, model.cfg.seed, threads=threads)
    write_eval_csv([report], out / "report.csv")
    write_per_scene_csv(report, out / "per_scene.csv")
    write_predictions_csv(
        prediction_rows(model, scenes, tau, mask, model.cfg.seed), out / "predictions.csv"
    )
    scatter_plot(
        out / "gt_vs_pred.svg",
        [float(gt) for _, gt, _ in report.per_scene],
        [float(p) for _, _, p in report.per_scene],
        title=f"counts under {report.modality_mask}",
        x_label="ground truth",
        y_label="predicted",
    )
    write_manifest(
        out, "eval", model.cfg.seed, args.config,
        ["report.csv", "per_scene.csv", "predictions.csv", "gt_vs_pred.svg"],
    )
    print(f"mae={report.mae:.3f} rmse={report.rmse:.3f} nae={report.nae:.3f} tau={tau:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    threads = _resolve_threads(args)
    kernels.set_threads(threads)
    out = _prepare_out(args.out)
    if args.params:
        model, tau = CountModel.load(args.params)
    else:
        result = train(cfg, _load_split(args.data, "train"), _load_split(args.data, "val"), cfg.seed)
        model, tau = result.model, result.tau
    scenes = _load_split(args.data, "test")
    rows = run_modality_ablation(model, scenes, tau, model.cfg.seed, threads=threads)
    write_eval_csv(rows, out / "ablation.csv")
    bar_chart(
        out / "mae_by_modality.svg",
        [mask_label(m) for m in ABLATION_MASKS],
        [r.mae for r in rows],
        title="MAE by prompt modality",
        y_label="MAE",
    )
    negatives = run_irrelevant_negative(model, scenes, tau, model.cfg.seed, threads=threads)
    write_eval_csv(negatives, out / "negative_relevance.csv")
    write_manifest(
        out, "ablate", model.cfg.seed, args.config,
        ["ablation.csv", "mae_by_modality.svg", "negative_relevance.csv"],
    )
    for row in rows:
        print(f"{row.modality_mask:<28} mae={row.mae:.3f} rmse={row.rmse:.3f} nae={row.nae:.3f}")
    for row in negatives:
        print(f"{row.modality_mask:<28} mae={row.mae:.3f} rmse={row.rmse:.3f} nae={row.nae:.3f}")
    return 0


def cmd_swap(args) -> int:
    cfg = _load_cfg(args)
    threads = _resolve_threads(args)
    kernels.set_threads(threads)
    out = _prepare_out(args.out)
    model, tau = CountModel.load(args.params)
    mask = parse_mask(args.mask) if args.mask else None
    scenes = _load_split(args.data, "test")
    outcome = run_swap_test(model, scenes, tau, model.cfg.seed, mask=mask, threads=threads)
    write_eval_csv([outcome.forward, outcome.swapped], out / "swap.csv")
    write_per_scene_csv(outcome.forward, out / "per_scene_forward.csv")
    write_per_scene_csv(outcome.swapped, out / "per_scene_swapped.csv")
    bar_chart(
        out / "swap_tracking.svg",
        ["forward", "swapped"],
        [outcome.closer_forward, outcome.closer_swapped],
        title="fraction of scenes tracking the prompted category",
        y_label="fraction",
    )
    write_manifest(
        out, "swap", model.cfg.seed, args.config,
        ["swap.csv", "per_scene_forward.csv", "per_scene_swapped.csv", "swap_tracking.svg"],
    )
    print(
        f"tracking fraction forward={outcome.closer_forward:.3f} "
        f"swapped={outcome.closer_swapped:.3f} (undecidable {outcome.undecidable}); "
        f"corr prompted={outcome.corr_prompted:.3f} other={outcome.corr_other:.3f}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    rows = run_gradient_suite(seed=args.seed, points=args.points)
    print(format_rows(rows))
    return 0 if all(r.passed for r in rows) else 3


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "generate": cmd_generate,
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "swap": cmd_swap,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ContractError, SceneFormatError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except CountexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
