"""Experiment runner.

Every command reads one JSON config, writes into
`<output_dir>/<command>-<config-hash>/`, and drops a run manifest (config
copy, seeds, wall time, parallelism degree, output list) next to its
artifacts.  Exit codes: 0 success, 2 invalid config, 3 missing
checkpoint, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import (
    CheckpointError,
    encoder_fingerprint,
    load_checkpoint,
    params_from_arrays,
    save_checkpoint,
)
from .config import ConfigError, ExperimentConfig
from .metrics import evaluate_params, fixed_seed_swap_compare, psnr
from .refcond import RefCondConfig, decode_conditioned_t
from .synthdata import build_dataset, gen_clip, realize, save_manifest, write_rdvc
from .tensor import NumericsError, Tensor, set_default_dtype
from .training import (
    CurriculumSpec,
    RefPolicy,
    StageSpec,
    pretrain_baseline,
    train_refdecoder,
    write_loss_csv,
)
from .vae import VaeConfig, decode_baseline_t, encode_t

EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERIC = 4

DROPOUT_GRID = (0.0, 0.3, 0.7)
BLOCKS_GRID = (3, 5, 7, 10)


def _parallelism_degree() -> int:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS"):
        if os.environ.get(var):
            return int(os.environ[var])
    return os.cpu_count() or 1


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


class Runner:
    """Output-directory and manifest bookkeeping shared by all commands."""

    def __init__(self, command: str, cfg: ExperimentConfig, args):
        self.command = command
        self.cfg = cfg
        self.args = args
        root = Path(args.out) if args.out else Path(cfg.output_dir)
        self.outdir = root / f"{command}-{cfg.hash12}"
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.started = time.perf_counter()
        self.extra: dict = {}

    def finish(self) -> Path:
        outputs = sorted(str(p.relative_to(self.outdir))
                         for p in self.outdir.rglob("*")
                         if p.is_file() and p.name != "manifest.json")
        manifest = {
            "command": self.command,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.config_hash(),
            "code_version": __version__,
            "parallelism_degree": _parallelism_degree(),
            "workers": self.args.workers,
            "seeds": asdict(self.cfg.seeds),
            "outputs": outputs,
            "extra": self.extra,
            "wall_time_s": round(time.perf_counter() - self.started, 3),
        }
        _write_json(self.outdir / "manifest.json", manifest)
        return self.outdir


def _ckpt_meta(cfg: ExperimentConfig, kind: str, opt_step: int) -> dict:
    return {
        "kind": kind,
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "injection": cfg.injection,
        "vae": asdict(cfg.vae),
        "refdec": asdict(cfg.refdec),
        "opt_step": opt_step,
    }


def _model_cfgs_from_meta(meta: dict) -> tuple[VaeConfig, RefCondConfig]:
    vae_d = dict(meta["vae"])
    for k in ("stage_channels", "stage_kernels"):
        vae_d[k] = tuple(vae_d[k])
    ref_d = dict(meta["refdec"])
    ref_d["token_strides"] = tuple(ref_d["token_strides"])
    return VaeConfig(**vae_d), RefCondConfig(**ref_d)


def _load_ckpt_params(path: str | Path, trainable: bool = False):
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    arrays, meta = load_checkpoint(p)
    return params_from_arrays(arrays, trainable=trainable), meta


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, args) -> Path:
    run = Runner("gen-data", cfg, args)
    train, val = build_dataset(cfg.dataset)
    save_manifest(run.outdir / "dataset_manifest.json", cfg.dataset, train, val)
    if args.dump:
        clips_dir = run.outdir / "clips"
        clips_dir.mkdir(exist_ok=True)
        for ref in train + val:
            write_rdvc(clips_dir / f"{ref.clip_id}.rdvc", realize(ref, cfg.dataset).frames)
    run.extra["n_train"] = len(train)
    run.extra["n_val"] = len(val)
    return run.finish()


def cmd_pretrain(cfg: ExperimentConfig, args) -> Path:
    run = Runner("pretrain", cfg, args)
    train, _ = build_dataset(cfg.dataset)
    params, rows, opt = pretrain_baseline(train, cfg.dataset, cfg.vae, cfg.curriculum,
                                          cfg.optimizer, cfg.seeds.train_seed, cfg.lambda_perc)
    arrays = {n: p.data for n, p in params.items()}
    arrays.update(opt.state_arrays())
    meta = _ckpt_meta(cfg, "baseline", opt.step_count)
    save_checkpoint(run.outdir / "baseline.ckpt", arrays, meta)
    write_loss_csv(run.outdir / "loss.csv", rows)
    run.extra["final_loss"] = rows[-1]["loss_total"]
    return run.finish()


def cmd_train(cfg: ExperimentConfig, args) -> Path:
    baseline_path = args.baseline or cfg.baseline_checkpoint
    if not baseline_path:
        raise CheckpointError("no baseline checkpoint given (flag --baseline or config)")
    baseline, base_meta = _load_ckpt_params(baseline_path)
    run = Runner("train", cfg, args)
    train, _ = build_dataset(cfg.dataset)
    params, rows, opt = train_refdecoder(
        baseline, train, cfg.dataset, cfg.vae, cfg.refdec, cfg.curriculum, cfg.optimizer,
        cfg.dropout, cfg.ref_policy, cfg.seeds.train_seed, cfg.injection, cfg.lambda_perc)
    arrays = {n: p.data for n, p in params.items()}
    arrays.update(opt.state_arrays())
    kind = "refdec" if cfg.injection == "attention" else "controlnet"
    meta = _ckpt_meta(cfg, kind, opt.step_count)
    meta["baseline_config_hash"] = base_meta.get("config_hash", "")
    save_checkpoint(run.outdir / "refdec.ckpt", arrays, meta)
    write_loss_csv(run.outdir / "loss.csv", rows)
    run.extra["final_loss"] = rows[-1]["loss_total"]
    run.extra["baseline_checkpoint"] = str(baseline_path)
    return run.finish()


def _evaluate_checkpoint(cfg: ExperimentConfig, ckpt_path: str, val_refs) -> dict:
    params, meta = _load_ckpt_params(ckpt_path)
    vae_cfg, ref_cfg = _model_cfgs_from_meta(meta)
    conditioned = meta["kind"] != "baseline"
    report = evaluate_params(
        val_refs, cfg.dataset, vae_cfg, ref_cfg, params, cfg.seeds.eval_seed,
        cfg.eval_ref_policy, meta.get("injection", "attention"), conditioned,
        metadata={"checkpoint": str(ckpt_path), "checkpoint_kind": meta["kind"],
                  "config_hash": cfg.config_hash(), "code_version": __version__,
                  "parallelism_degree": _parallelism_degree()})
    return {"report": report, "meta": meta}


def cmd_eval(cfg: ExperimentConfig, args) -> Path:
    if not args.ckpt:
        raise CheckpointError("eval needs at least one --ckpt")
    run = Runner("eval", cfg, args)
    _, val = build_dataset(cfg.dataset)
    for i, ckpt in enumerate(args.ckpt):
        result = _evaluate_checkpoint(cfg, ckpt, val)
        report = result["report"]
        stem = f"metrics-{i}-{result['meta']['kind']}"
        (run.outdir / f"{stem}.json").write_text(report.to_json())
        _write_csv(run.outdir / f"{stem}.csv", report.csv_rows(),
                   ["clip_id", "metric", "split", "value"])
        run.extra[stem] = report.aggregate["psnr"]["overall"]
    return run.finish()


def cmd_swap_compare(cfg: ExperimentConfig, args) -> Path:
    params_base, meta_base = _load_ckpt_params(args.baseline)
    params_cond, meta_cond = _load_ckpt_params(args.refdec)
    if meta_base["kind"] != "baseline":
        raise CheckpointError(f"{args.baseline} is not a baseline checkpoint")
    run = Runner("swap-compare", cfg, args)
    _, val = build_dataset(cfg.dataset)
    vae_cfg, ref_cfg = _model_cfgs_from_meta(meta_cond)
    result = fixed_seed_swap_compare(
        val, cfg.dataset, vae_cfg, ref_cfg, params_base, params_cond,
        cfg.seeds.eval_seed, run.outdir, cfg.eval_ref_policy,
        meta_cond.get("injection", "attention"))
    (run.outdir / "baseline_metrics.json").write_text(result.baseline.to_json())
    (run.outdir / "refdec_metrics.json").write_text(result.conditioned.to_json())
    _write_json(run.outdir / "seedlog.json", result.seed_log)
    _write_csv(run.outdir / "deltas.csv", result.deltas,
               ["clip_id", "category", "delta_psnr", "delta_psnr_reference", "delta_ssim"])
    run.extra["mean_delta_psnr"] = result.mean_delta_psnr
    run.extra["fraction_improved"] = result.fraction_improved
    run.extra["checkpoints"] = {"baseline": str(args.baseline), "refdec": str(args.refdec)}
    return run.finish()


# -- ablation grids -------------------------------------------------------------


def _one_stage_curriculum(cur: CurriculumSpec) -> CurriculumSpec:
    first = cur.stages[0]
    return CurriculumSpec((StageSpec(first.frames, first.height, first.width,
                                     cur.total_steps),))


def _grid_points(cfg: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    points = []
    if axis == "dropout":
        for r in DROPOUT_GRID:
            points.append((f"rmax-{r}", replace(cfg, dropout=replace(cfg.dropout, r_max=r))))
    elif axis == "blocks":
        for n in BLOCKS_GRID:
            points.append((f"blocks-{n}", replace(cfg, refdec=replace(cfg.refdec, n_blocks=n))))
    elif axis == "ref_policy":
        for policy in (RefPolicy.first_frame, RefPolicy.random_frame):
            points.append((f"train-{policy.value}", replace(cfg, ref_policy=policy)))
    elif axis == "curriculum":
        points.append(("one-stage", replace(cfg, curriculum=_one_stage_curriculum(cfg.curriculum))))
        points.append(("two-stage", cfg))
    elif axis == "injection":
        points.append(("attention", replace(cfg, injection="attention")))
        points.append(("controlnet", replace(cfg, injection="controlnet")))
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    return points


def _run_grid_point(payload: tuple) -> list[dict]:
    label, cfg_dict, baseline_path, point_dir, axis = payload
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cfg.validate()
    point_dir = Path(point_dir)
    point_dir.mkdir(parents=True, exist_ok=True)
    baseline, _ = _load_ckpt_params(baseline_path)
    train, val = build_dataset(cfg.dataset)
    params, rows, opt = train_refdecoder(
        baseline, train, cfg.dataset, cfg.vae, cfg.refdec, cfg.curriculum, cfg.optimizer,
        cfg.dropout, cfg.ref_policy, cfg.seeds.train_seed, cfg.injection, cfg.lambda_perc)
    arrays = {n: p.data for n, p in params.items()}
    arrays.update(opt.state_arrays())
    kind = "refdec" if cfg.injection == "attention" else "controlnet"
    save_checkpoint(point_dir / "refdec.ckpt", arrays, _ckpt_meta(cfg, kind, opt.step_count))
    write_loss_csv(point_dir / "loss.csv", rows)

    eval_policies = ([RefPolicy.first_frame, RefPolicy.random_frame]
                     if axis == "ref_policy" else [cfg.eval_ref_policy])
    table_rows = []
    for policy in eval_policies:
        report = evaluate_params(val, cfg.dataset, cfg.vae, cfg.refdec, params,
                                 cfg.seeds.eval_seed, policy, cfg.injection, True)
        stem = f"metrics-eval-{policy.value}"
        (point_dir / f"{stem}.json").write_text(report.to_json())
        agg = report.aggregate
        table_rows.append({
            "axis": axis, "setting": label, "eval_policy": policy.value,
            "psnr_overall": agg["psnr"]["overall"],
            "psnr_reference": agg["psnr"]["reference_frame"],
            "ssim_overall": agg["ssim"]["overall"],
            "ssim_reference": agg["ssim"]["reference_frame"],
        })
    return table_rows


def cmd_ablate(cfg: ExperimentConfig, args) -> Path:
    baseline_path = args.baseline or cfg.baseline_checkpoint
    if not baseline_path:
        raise CheckpointError("no baseline checkpoint given (flag --baseline or config)")
    if not Path(baseline_path).exists():
        raise CheckpointError(f"checkpoint not found: {baseline_path}")
    run = Runner(f"ablate-{args.axis}", cfg, args)
    points = _grid_points(cfg, args.axis)
    payloads = [(label, point_cfg.to_dict(), str(baseline_path),
                 str(run.outdir / f"point-{label}"), args.axis)
                for label, point_cfg in points]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_run_grid_point, payloads))
    else:
        results = [_run_grid_point(p) for p in payloads]
    table = [row for rows in results for row in rows]
    _write_csv(run.outdir / "table.csv", table,
               ["axis", "setting", "eval_policy", "psnr_overall", "psnr_reference",
                "ssim_overall", "ssim_reference"])
    _write_json(run.outdir / "table.json", {"axis": args.axis, "rows": table})
    run.extra["points"] = [label for label, _ in points]
    return run.finish()


def cmd_decode(cfg: ExperimentConfig, args) -> Path:
    params, meta = _load_ckpt_params(args.ckpt)
    vae_cfg, ref_cfg = _model_cfgs_from_meta(meta)
    run = Runner("decode", cfg, args)

    ground_truth = None
    ref_index = None
    if args.latent:
        z = np.load(args.latent).astype(np.float32)
    elif args.clip_seed is not None:
        clip = gen_clip(args.clip_seed, args.category, cfg.dataset.frames,
                        cfg.dataset.height, cfg.dataset.width)
        ground_truth = clip.frames
        z = encode_t(Tensor(clip.frames), vae_cfg, params).data
    else:
        raise ConfigError("decode needs --latent FILE or --clip-seed N")

    ref_image = None
    if args.ref and args.ref != "none":
        if args.ref.startswith("frame:"):
            if ground_truth is None:
                raise ConfigError("frame references need --clip-seed")
            ref_index = int(args.ref.split(":", 1)[1])
            ref_image = ground_truth[ref_index]
        else:
            ref_image = np.load(args.ref).astype(np.float32)

    if meta["kind"] == "baseline":
        if ref_image is not None:
            raise ConfigError("baseline checkpoints cannot take a reference image")
        decoded = decode_baseline_t(Tensor(z), vae_cfg, params).data
    else:
        decoded = decode_conditioned_t(Tensor(z), ref_image, vae_cfg, ref_cfg, params,
                                       meta.get("injection", "attention")).data
    write_rdvc(run.outdir / "frames.rdvc", decoded)

    if ground_truth is not None:
        frames_psnr, mean_psnr = psnr(ground_truth, decoded)
        sidecar = {"per_frame_psnr": frames_psnr, "mean_psnr": mean_psnr,
                   "reference_index": ref_index}
        _write_json(run.outdir / "psnr.json", sidecar)
        run.extra["mean_psnr"] = mean_psnr
    return run.finish()


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refvae",
                                     description="reference-conditioned video autoencoder experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", default=None, help="output root (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--workers", type=int, default=1, help="process parallelism (recorded)")
        p.add_argument("--f64", action="store_true", help="64-bit verification mode")

    p = sub.add_parser("gen-data", help="materialise the dataset manifest")
    common(p)
    p.add_argument("--dump", action="store_true", help="also write raw clip dumps")

    p = sub.add_parser("pretrain", help="train the baseline autoencoder")
    common(p)

    p = sub.add_parser("train", help="fine-tune the reference-conditioned decoder")
    common(p)
    p.add_argument("--baseline", default=None, help="baseline checkpoint path")

    p = sub.add_parser("eval", help="reconstruction metrics for checkpoints")
    common(p)
    p.add_argument("--ckpt", action="append", default=[], help="checkpoint (repeatable)")

    p = sub.add_parser("swap-compare", help="paired fixed-seed decoder comparison")
    common(p)
    p.add_argument("--baseline", required=True)
    p.add_argument("--refdec", required=True)

    p = sub.add_parser("ablate", help="run an ablation grid")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=["dropout", "blocks", "ref_policy", "curriculum", "injection"])
    p.add_argument("--baseline", default=None, help="baseline checkpoint path")

    p = sub.add_parser("decode", help="decode a latent or synthetic clip to frames")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--latent", default=None, help="latent .npy file")
    p.add_argument("--clip-seed", type=int, default=None, dest="clip_seed")
    p.add_argument("--category", default="content_rich")
    p.add_argument("--ref", default="none", help="'none', 'frame:K', or an image .npy")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "swap-compare": cmd_swap_compare,
    "ablate": cmd_ablate,
    "decode": cmd_decode,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seeds.master = args.seed
            cfg.seeds.train = None
            cfg.seeds.eval = None
        if args.f64:
            set_default_dtype(np.float64)
        outdir = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error code={EXIT_CONFIG} command={args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"error code={EXIT_CHECKPOINT} command={args.command}: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericsError as exc:
        print(f"error code={EXIT_NUMERIC} command={args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(outdir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
