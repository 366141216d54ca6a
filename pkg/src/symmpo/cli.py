"""Command-line entry point: gen-data, train, eval, gradcheck, partition-report, sweep.

Machine-readable output (JSONL / CSV / one JSON summary line) goes to
stdout or files; human-readable progress goes to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .datagen import Dataset, GenerationError, build_preference_dataset, read_dataset, write_dataset
from .domain import (
    CONTRASTIVE_MODES,
    FULL_SCALE_LR,
    ConfigError,
    DegenerateSampleError,
    HyperParams,
    WorldConfig,
    config_hash,
)
from .objectives import encode_batch
from .partition import GroundTruthReward, compare_vco_gradients
from .policy import PolicyParams, load_checkpoint, save_checkpoint
from .trainer import (
    OBJECTIVES,
    OPTIMIZERS,
    TrainConfig,
    TrainingError,
    evaluate_contrastive_accuracy,
    evaluate_hallucination_rate,
    make_objective,
    train,
)
from .verify import DEFAULT_H, DEFAULT_TOLERANCE, LOSS_IDS, run_battery

PUBLISHED_LAMBDA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)
PUBLISHED_GAMMA_GRID = (1e-2, 1e-3, 1e-4, 1e-5)
PUBLISHED_LR_GRID = (5e-5, 5e-6, 5e-7)
SWEEP_HEADER = ("cell", "loss", "hallucination_rate", "contrastive_accuracy")


class UsageFailure(Exception):
    """Bad inputs; reported with exit code 2."""


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SYMPO_THREADS", "1")))
    except ValueError:
        return 1


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- gen-data


def _add_world_flags(p: argparse.ArgumentParser) -> None:
    d = WorldConfig()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--d-img", type=int, default=d.d_img)
    p.add_argument("--n-prompts", type=int, default=d.n_prompts)
    p.add_argument("--q", type=int, default=d.q)
    p.add_argument("--n-images", type=int, default=d.n_images)
    p.add_argument("--flip-count", type=int, default=d.flip_count)
    p.add_argument("--contrastive-mode", choices=CONTRASTIVE_MODES, default=d.contrastive_mode)
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma)
    p.add_argument("--synthetic-drop", type=int, default=d.synthetic_drop)
    p.add_argument("--heldout-fraction", type=float, default=d.heldout_fraction)


def _world_from_args(args, mode: str | None = None) -> WorldConfig:
    return WorldConfig(
        d_img=args.d_img,
        n_prompts=args.n_prompts,
        q=args.q,
        n_images=args.n_images,
        flip_count=args.flip_count,
        contrastive_mode=mode or args.contrastive_mode,
        noise_sigma=args.noise_sigma,
        synthetic_drop=args.synthetic_drop,
        heldout_fraction=args.heldout_fraction,
        seed=args.seed,
    )


def cmd_gen_data(args) -> int:
    world = _world_from_args(args)
    dataset = build_preference_dataset(world)
    write_dataset(dataset, args.out)
    meta = dataset.metadata()
    _err(f"gen-data: {meta['n_train']} train / {meta['n_heldout']} heldout samples, drops {meta['drops']} -> {args.out}")
    return 0


# ---------------------------------------------------------------- train


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    h = HyperParams()
    p.add_argument("--objective", choices=OBJECTIVES, default="symmpo")
    p.add_argument("--ablate", choices=("pair", "margin", "ancpo"), help="alias for --objective symmpo_wo_<name>")
    p.add_argument("--beta", type=float, default=h.beta)
    p.add_argument("--delta", type=float, default=h.delta)
    p.add_argument("--lambda", dest="lam", type=float, default=h.lam)
    p.add_argument("--gamma", type=float, default=h.gamma)
    p.add_argument("--eta", type=float, default=h.eta)
    p.add_argument("--lr", type=float, default=None, help=f"default {h.lr} (toy scale)")
    p.add_argument("--paper-defaults", action="store_true", help=f"use lr={FULL_SCALE_LR}; does not converge at toy scale")
    p.add_argument("--epochs", type=int, default=h.epochs)
    p.add_argument("--batch-size", type=int, default=h.batch_size)
    p.add_argument("--margin-uses-beta", action="store_true")
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="sgd")
    p.add_argument("--shuffle-seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--reward-scale", type=float, default=1.0)
    p.add_argument("--init-checkpoint", type=Path, help="initial policy, also used as the frozen reference")


def _train_config_from_args(args) -> TrainConfig:
    objective = args.objective
    if args.ablate:
        if objective not in ("symmpo", f"symmpo_wo_{args.ablate}"):
            raise UsageFailure(f"--ablate applies to the symmpo objective, not {objective!r}")
        objective = f"symmpo_wo_{args.ablate}"
    lr = args.lr if args.lr is not None else (FULL_SCALE_LR if args.paper_defaults else HyperParams().lr)
    hp = HyperParams(
        beta=args.beta,
        delta=args.delta,
        lam=args.lam,
        gamma=args.gamma,
        eta=args.eta,
        lr=lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        margin_uses_beta=args.margin_uses_beta,
    )
    return TrainConfig(
        objective=objective,
        hyper=hp,
        optimizer=args.optimizer,
        shuffle_seed=args.shuffle_seed,
        eval_every=args.eval_every,
        reward_scale=args.reward_scale,
    )


def _digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _load_data(path) -> Dataset:
    if path is None or not (Path(path) / "metadata.json").exists():
        raise UsageFailure(f"dataset not found: {path}")
    return read_dataset(path)


def run_training(data_dir, out_dir, config: TrainConfig, init_checkpoint=None) -> dict:
    """Train on a dataset directory and write metrics.jsonl, params.ckpt, summary.json."""
    dataset = _load_data(data_dir)
    world = dataset.config
    if init_checkpoint is not None:
        if not Path(init_checkpoint).exists():
            raise UsageFailure(f"checkpoint not found: {init_checkpoint}")
        init = load_checkpoint(init_checkpoint)
    else:
        init = PolicyParams.for_world(world)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(
        {
            "dataset": config_hash(world),
            "train": asdict(config),
            "init": None if init_checkpoint is None else _digest(init_checkpoint),
        }
    )
    try:
        params, log = train(dataset.train, config, init, dataset.heldout)
    except TrainingError as exc:
        exc.log.write(out / "metrics.jsonl")
        raise
    log.write(out / "metrics.jsonl")
    save_checkpoint(out / "params.ckpt", params)

    objective = make_objective(config, init, dataset.train)
    full = encode_batch(dataset.train, params.d_img, params.n_prompts, params.K)
    final_loss = objective(full, params, np.arange(len(dataset.train)))[0].total
    split = dataset.heldout or dataset.train
    summary = {
        "final_loss": final_loss,
        "hallucination_rate": evaluate_hallucination_rate(params, split).rate,
        "contrastive_accuracy": evaluate_contrastive_accuracy(params, init, split, config.hyper),
        "config_hash": chash,
    }
    _write_json(out / "run.json", {"config_hash": chash, "world": asdict(world), "train": asdict(config)})
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train(args) -> int:
    config = _train_config_from_args(args)
    summary = run_training(args.data, args.out, config, args.init_checkpoint)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    dataset = _load_data(args.data)
    if not args.checkpoint.exists():
        raise UsageFailure(f"checkpoint not found: {args.checkpoint}")
    params = load_checkpoint(args.checkpoint)
    ref = load_checkpoint(args.ref_checkpoint) if args.ref_checkpoint else PolicyParams.for_world(dataset.config)
    split = {"train": dataset.train, "heldout": dataset.heldout, "all": dataset.samples}[args.split]
    if not split:
        raise UsageFailure(f"split {args.split!r} is empty")
    hall = evaluate_hallucination_rate(params, split)
    result = {
        "split": args.split,
        "hallucination_rate": hall.rate,
        "mention_rate": hall.mention_rate,
        "contrastive_accuracy": evaluate_contrastive_accuracy(params, ref, split, HyperParams(beta=args.beta)),
        "config_hash": config_hash({"dataset": config_hash(dataset.config), "checkpoint": _digest(args.checkpoint)}),
    }
    print(json.dumps(result, sort_keys=True))
    return 0


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    losses = tuple(args.loss) if args.loss else LOSS_IDS
    out = sys.stdout

    def emit(rep):
        out.write(json.dumps(rep.record(), separators=(",", ":")) + "\n")

    reports = run_battery(losses, args.instances, args.seed, args.h, args.tolerance, on_report=emit)
    failed = [r for r in reports if not r.passed]
    for loss_id in losses:
        mine = [r for r in reports if r.loss_id == loss_id]
        worst = max(r.max_rel_err for r in mine)
        _err(f"gradcheck {loss_id:9s} max rel err {worst:.3e} ({sum(not r.passed for r in mine)} failures)")
    return 0 if not failed else 1


# ---------------------------------------------------------------- partition-report


def cmd_partition_report(args) -> int:
    dataset = _load_data(args.data)
    if not args.checkpoint.exists():
        raise UsageFailure(f"checkpoint not found: {args.checkpoint}")
    ref = load_checkpoint(args.checkpoint)
    params = ref
    if args.policy_checkpoint is not None:
        if not args.policy_checkpoint.exists():
            raise UsageFailure(f"checkpoint not found: {args.policy_checkpoint}")
        params = load_checkpoint(args.policy_checkpoint)
    split = {"train": dataset.train, "heldout": dataset.heldout, "all": dataset.samples}[args.split]
    if not split:
        raise UsageFailure(f"split {args.split!r} is empty")
    hp = HyperParams(beta=args.beta)
    reports = compare_vco_gradients(split, params, ref, GroundTruthReward(args.reward_scale), hp)
    buf = io.StringIO()
    for rep in reports:
        buf.write(json.dumps(rep.record(), separators=(",", ":")) + "\n")
    cs = np.array([r.c for r in reports])
    counts, edges = np.histogram(cs, bins=args.bins)
    chash = config_hash(
        {
            "dataset": config_hash(dataset.config),
            "ref": _digest(args.checkpoint),
            "policy": None if args.policy_checkpoint is None else _digest(args.policy_checkpoint),
            "reward_scale": args.reward_scale,
            "beta": args.beta,
            "split": args.split,
        }
    )
    meta = {
        "config_hash": chash,
        "n": len(reports),
        "c_histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
        "max_abs_c": float(np.max(np.abs(cs))),
    }
    if args.out is None:
        sys.stdout.write(buf.getvalue())
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(buf.getvalue())
        _write_json(args.out.with_name(args.out.name + ".meta.json"), meta)
    _err(f"partition-report: {len(reports)} samples, max |c| = {meta['max_abs_c']:.4g}")
    for n, lo, hi in zip(counts, edges[:-1], edges[1:]):
        _err(f"  c in [{lo:+.4f}, {hi:+.4f}): {n}")
    return 0


# ---------------------------------------------------------------- sweep


def _fmt(v: float) -> str:
    return repr(float(v))


def _sweep_cell(job) -> dict:
    data_dir, cell_dir, config = job
    cell_dir = Path(cell_dir)
    summary_path = cell_dir / "summary.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text(encoding="utf-8"))
    return run_training(data_dir, cell_dir, config)


def cmd_sweep(args) -> int:
    out = Path(args.out)
    base = _train_config_from_args(args)
    lams = args.lambda_grid or (list(PUBLISHED_LAMBDA_GRID) if args.published_grid else [base.hyper.lam])
    gammas = args.gamma_grid or (list(PUBLISHED_GAMMA_GRID) if args.published_grid else [base.hyper.gamma])
    lrs = args.lr_grid or (list(PUBLISHED_LR_GRID) if args.published_grid else [base.hyper.lr])
    if not (lams and gammas and lrs):
        raise UsageFailure("sweep grids must be nonempty")

    if args.data is not None:
        datasets = [("data", Path(args.data))]
    else:
        modes = args.modes or [args.contrastive_mode]
        datasets = []
        for mode in modes:
            data_dir = out / "data" / mode
            if not (data_dir / "metadata.json").exists():
                write_dataset(build_preference_dataset(_world_from_args(args, mode)), data_dir)
            datasets.append((mode, data_dir))

    jobs, names = [], []
    for tag, data_dir in datasets:
        for lam in lams:
            for gamma in gammas:
                for lr in lrs:
                    name = f"{tag}_lambda{_fmt(lam)}_gamma{_fmt(gamma)}_lr{_fmt(lr)}"
                    hp = replace(base.hyper, lam=lam, gamma=gamma, lr=lr)
                    names.append(name)
                    jobs.append((str(data_dir), str(out / "cells" / name), replace(base, hyper=hp)))

    threads = min(_threads(), len(jobs))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            summaries = list(pool.map(_sweep_cell, jobs))
    else:
        summaries = [_sweep_cell(job) for job in jobs]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for name, s in zip(names, summaries):
        writer.writerow([name, repr(s["final_loss"]), repr(s["hallucination_rate"]), repr(s["contrastive_accuracy"])])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    _write_json(out / "sweep.json", {"config_hash": config_hash({"cells": names, "train": asdict(base)}), "cells": names})
    _err(f"sweep: {len(names)} cells -> {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symmpo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic preference dataset")
    _add_world_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy policy on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="hallucination and contrastive metrics of a checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--ref-checkpoint", type=Path)
    p.add_argument("--split", choices=("train", "heldout", "all"), default="heldout")
    p.add_argument("--beta", type=float, default=HyperParams().beta)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--loss", action="append", choices=LOSS_IDS)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=DEFAULT_H)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("partition-report", help="per-sample partition offsets and gradient coefficients")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="reference policy pi_ref")
    p.add_argument("--policy-checkpoint", type=Path, help="policy pi_theta (default: the reference)")
    p.add_argument("--reward-scale", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=HyperParams().beta)
    p.add_argument("--split", choices=("train", "heldout", "all"), default="all")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_partition_report)

    p = sub.add_parser("sweep", help="grid sweep over lambda, gamma, lr and contrastive modes")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--data", type=Path, help="fixed dataset; otherwise one is generated per mode")
    _add_world_flags(p)
    p.add_argument("--modes", type=lambda s: [m for m in s.split(",") if m], help="comma list of contrastive modes")
    _add_train_flags(p)
    p.add_argument("--lambda-grid", type=_float_list)
    p.add_argument("--gamma-grid", type=_float_list)
    p.add_argument("--lr-grid", type=_float_list)
    p.add_argument("--published-grid", action="store_true", help="fill unspecified grids with the published search ranges")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "modes", None):
        bad = [m for m in args.modes if m not in CONTRASTIVE_MODES]
        if bad:
            parser.error(f"unknown contrastive mode(s): {bad}")
    try:
        return args.func(args)
    except (UsageFailure, ConfigError, GenerationError, DegenerateSampleError) as exc:
        _err(f"error: {exc}")
        return 2
    except TrainingError as exc:
        _err(f"training aborted: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
