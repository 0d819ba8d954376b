"""Quality metrics and the paired fixed-seed evaluation protocol.

All metrics are deterministic functions of their inputs.  PSNR is capped
at 99 dB so aggregates stay finite; SSIM uses a uniform 7x7 window over
positions where the window fits entirely inside the frame (and, for the
masked variant, entirely inside the mask).

The swap comparison decodes the *same* latent with two decoders, so every
per-clip delta is attributable to the decoder alone.  Per-clip 32-bit
seeds drive any evaluation-time randomness (the reference-frame draw) and
are persisted with the latents, making a rerun bit-exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import encoder_fingerprint
from .refcond import RefCondConfig, decode_conditioned_t
from .synthdata import ClipRef, DatasetSpec, realize
from .tensor import Tensor
from .training import RefPolicy, perceptual_proxy, select_reference_frame
from .vae import VaeConfig, decode_baseline_t, encode_t

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4


def _check_pair(x: np.ndarray, x_hat: np.ndarray) -> None:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError("expected [T, 3, H, W] clips")


def psnr(x: np.ndarray, x_hat: np.ndarray) -> tuple[list[float], float]:
    """Per-frame 10*log10(1/MSE) in dB (peak 1.0), capped at 99 dB."""
    _check_pair(x, x_hat)
    per_frame = []
    for t in range(x.shape[0]):
        mse = float(np.mean((x[t].astype(np.float64) - x_hat[t].astype(np.float64)) ** 2))
        per_frame.append(PSNR_CAP if mse == 0.0 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))
    return per_frame, float(np.mean(per_frame))


def _box_sum(img: np.ndarray, win: int) -> np.ndarray:
    """Sums over all win x win windows fully inside img (valid mode)."""
    ii = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.float64)
    ii[1:, 1:] = img.cumsum(axis=0).cumsum(axis=1)
    return ii[win:, win:] - ii[:-win, win:] - ii[win:, :-win] + ii[:-win, :-win]


def _ssim_map(a: np.ndarray, b: np.ndarray, win: int) -> np.ndarray:
    n = win * win
    mu_a = _box_sum(a, win) / n
    mu_b = _box_sum(b, win) / n
    var_a = _box_sum(a * a, win) / n - mu_a * mu_a
    var_b = _box_sum(b * b, win) / n - mu_b * mu_b
    cov = _box_sum(a * b, win) / n - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(x: np.ndarray, x_hat: np.ndarray, window: int = SSIM_WINDOW) -> tuple[list[float], float]:
    """Uniform-window SSIM per frame (mean over channels and positions)."""
    _check_pair(x, x_hat)
    if x.shape[2] < window or x.shape[3] < window:
        raise ValueError(f"frame {x.shape[2]}x{x.shape[3]} smaller than window {window}")
    per_frame = []
    for t in range(x.shape[0]):
        vals = [_ssim_map(x[t, c].astype(np.float64), x_hat[t, c].astype(np.float64), window).mean()
                for c in range(3)]
        per_frame.append(float(np.mean(vals)))
    return per_frame, float(np.mean(per_frame))


def flicker_error(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Mean deviation of reconstructed frame differences from ground truth's."""
    _check_pair(x, x_hat)
    if x.shape[0] < 2:
        raise ValueError("flicker needs at least two frames")
    d_hat = np.diff(x_hat.astype(np.float64), axis=0)
    d_ref = np.diff(x.astype(np.float64), axis=0)
    return float(np.abs(d_hat - d_ref).mean())


def temporal_consistency_proxy(x_hat: np.ndarray, x: np.ndarray) -> float:
    """Gap between consecutive-frame perceptual distances of the two clips."""
    _check_pair(x, x_hat)
    if x.shape[0] < 2:
        raise ValueError("temporal consistency needs at least two frames")
    gaps = []
    for t in range(x.shape[0] - 1):
        p_hat = perceptual_proxy(Tensor(x_hat[t:t + 1]), Tensor(x_hat[t + 1:t + 2])).item()
        p_ref = perceptual_proxy(Tensor(x[t:t + 1]), Tensor(x[t + 1:t + 2])).item()
        gaps.append(abs(p_hat - p_ref))
    return float(np.mean(gaps))


def masked_metrics(x: np.ndarray, x_hat: np.ndarray, mask: np.ndarray,
                   window: int = SSIM_WINDOW) -> dict:
    """PSNR over mask=1 pixels and SSIM over windows fully inside the mask."""
    _check_pair(x, x_hat)
    if mask.shape != (x.shape[0], x.shape[2], x.shape[3]):
        raise ValueError(f"mask shape {mask.shape} does not match frames")
    mask = mask.astype(bool)
    psnr_frames = []
    ssim_frames = []
    for t in range(x.shape[0]):
        m = mask[t]
        if not m.any():
            raise ValueError(f"empty mask at frame {t}")
        diff = (x[t, :, m].astype(np.float64) - x_hat[t, :, m].astype(np.float64))
        mse = float(np.mean(diff ** 2))
        psnr_frames.append(PSNR_CAP if mse == 0.0 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))
        inside = _box_sum(m.astype(np.float64), window) == window * window
        if inside.any():
            vals = []
            for c in range(3):
                smap = _ssim_map(x[t, c].astype(np.float64), x_hat[t, c].astype(np.float64), window)
                vals.append(smap[inside].mean())
            ssim_frames.append(float(np.mean(vals)))
    if not ssim_frames:
        raise ValueError("mask admits no full SSIM window in any frame")
    return {
        "psnr_frames": psnr_frames, "psnr": float(np.mean(psnr_frames)),
        "ssim_frames": ssim_frames, "ssim": float(np.mean(ssim_frames)),
    }


def split_report(per_frame: list[float], ref_index: int) -> dict[str, float | None]:
    """Overall / reference-frame / non-reference means of a per-frame metric."""
    if not 0 <= ref_index < len(per_frame):
        raise ValueError(f"reference index {ref_index} out of range")
    others = [v for i, v in enumerate(per_frame) if i != ref_index]
    return {
        "overall": float(np.mean(per_frame)),
        "reference_frame": float(per_frame[ref_index]),
        "non_reference": float(np.mean(others)) if others else None,
    }


# -- reports -----------------------------------------------------------------


@dataclass
class MetricsReport:
    per_clip: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def finalize(self) -> "MetricsReport":
        agg: dict = {}
        for metric in ("psnr", "ssim"):
            agg[metric] = {}
            for split in ("overall", "reference_frame", "non_reference"):
                vals = [c[metric][split] for c in self.per_clip if c[metric][split] is not None]
                agg[metric][split] = float(np.mean(vals)) if vals else None
        for metric in ("l1", "flicker", "temporal_consistency"):
            agg[metric] = float(np.mean([c[metric] for c in self.per_clip]))
        self.aggregate = agg
        return self

    def to_json(self) -> str:
        return json.dumps({"per_clip": self.per_clip, "aggregate": self.aggregate,
                           "metadata": self.metadata}, indent=1, sort_keys=True)

    def csv_rows(self) -> list[dict]:
        rows = []
        for clip in self.per_clip:
            for metric in ("psnr", "ssim"):
                for split, value in clip[metric].items():
                    rows.append({"clip_id": clip["clip_id"], "metric": metric,
                                 "split": split, "value": value})
            for metric in ("l1", "flicker", "temporal_consistency"):
                rows.append({"clip_id": clip["clip_id"], "metric": metric,
                             "split": "overall", "value": clip[metric]})
        return rows


def clip_metrics(frames: np.ndarray, decoded: np.ndarray, ref_index: int,
                 clip_id: str, category: str) -> dict:
    psnr_frames, _ = psnr(frames, decoded)
    ssim_frames, _ = ssim(frames, decoded)
    return {
        "clip_id": clip_id,
        "category": category,
        "ref_index": ref_index,
        "psnr": split_report(psnr_frames, ref_index),
        "ssim": split_report(ssim_frames, ref_index),
        "l1": float(np.abs(frames.astype(np.float64) - decoded.astype(np.float64)).mean()),
        "flicker": flicker_error(decoded, frames),
        "temporal_consistency": temporal_consistency_proxy(decoded, frames),
    }


def derive_clip_seeds(master_seed: int, count: int) -> list[int]:
    rng = np.random.default_rng(np.random.PCG64(master_seed))
    return [int(s) for s in rng.integers(0, 2 ** 32, size=count, dtype=np.uint64)]


def evaluate_params(val_refs: list[ClipRef], data_spec: DatasetSpec, vae_cfg: VaeConfig,
                    ref_cfg: RefCondConfig | None, params: dict, master_seed: int,
                    eval_policy: RefPolicy = RefPolicy.first_frame,
                    injection: str = "attention", conditioned: bool = True,
                    metadata: dict | None = None) -> MetricsReport:
    """Reconstruction metrics of one decoder over a validation set."""
    seeds = derive_clip_seeds(master_seed, len(val_refs))
    report = MetricsReport(metadata=metadata or {})
    for ref, seed in zip(val_refs, seeds):
        clip = realize(ref, data_spec)
        z = encode_t(Tensor(clip.frames), vae_cfg, params)
        clip_rng = np.random.default_rng(np.random.PCG64(seed))
        ref_frame, ref_index = select_reference_frame(clip.frames, eval_policy, clip_rng)
        if conditioned:
            decoded = decode_conditioned_t(z, ref_frame, vae_cfg, ref_cfg, params, injection).data
        else:
            decoded = decode_baseline_t(z, vae_cfg, params).data
        report.per_clip.append(clip_metrics(clip.frames, decoded, ref_index,
                                            ref.clip_id, ref.category))
    report.metadata.update({"eval_policy": eval_policy.value, "master_seed": master_seed,
                            "conditioned": conditioned})
    return report.finalize()


# -- fixed-seed decoder swap ----------------------------------------------------


@dataclass
class SwapResult:
    baseline: MetricsReport
    conditioned: MetricsReport
    deltas: list[dict]
    seed_log: dict

    @property
    def mean_delta_psnr(self) -> float:
        return float(np.mean([d["delta_psnr"] for d in self.deltas]))

    @property
    def fraction_improved(self) -> float:
        return float(np.mean([d["delta_psnr"] > 0 for d in self.deltas]))


def fixed_seed_swap_compare(val_refs: list[ClipRef], data_spec: DatasetSpec,
                            vae_cfg: VaeConfig, ref_cfg: RefCondConfig,
                            params_baseline: dict, params_conditioned: dict,
                            master_seed: int, out_dir: Path | None = None,
                            eval_policy: RefPolicy = RefPolicy.first_frame,
                            injection: str = "attention") -> SwapResult:
    """Decode identical latents with both decoders and report paired deltas."""
    fp_base = encoder_fingerprint({n: p.data for n, p in params_baseline.items()})
    fp_cond = encoder_fingerprint({n: p.data for n, p in params_conditioned.items()})
    if fp_base != fp_cond:
        raise ValueError("encoder fingerprint mismatch between checkpoints")

    latent_dir = None
    if out_dir is not None:
        latent_dir = Path(out_dir) / "latents"
        latent_dir.mkdir(parents=True, exist_ok=True)

    seeds = derive_clip_seeds(master_seed, len(val_refs))
    entries = []
    rep_base = MetricsReport()
    rep_cond = MetricsReport()
    deltas = []
    for ref, seed in zip(val_refs, seeds):
        clip = realize(ref, data_spec)
        z = encode_t(Tensor(clip.frames), vae_cfg, params_baseline)
        latent_path = ""
        if latent_dir is not None:
            latent_path = str(latent_dir / f"{ref.clip_id}.npy")
            np.save(latent_path, z.data)
        clip_rng = np.random.default_rng(np.random.PCG64(seed))
        ref_frame, ref_index = select_reference_frame(clip.frames, eval_policy, clip_rng)

        decoded_base = decode_baseline_t(z, vae_cfg, params_baseline).data
        decoded_cond = decode_conditioned_t(Tensor(z.data), ref_frame, vae_cfg, ref_cfg,
                                            params_conditioned, injection).data
        m_base = clip_metrics(clip.frames, decoded_base, ref_index, ref.clip_id, ref.category)
        m_cond = clip_metrics(clip.frames, decoded_cond, ref_index, ref.clip_id, ref.category)
        rep_base.per_clip.append(m_base)
        rep_cond.per_clip.append(m_cond)
        deltas.append({
            "clip_id": ref.clip_id, "category": ref.category,
            "delta_psnr": m_cond["psnr"]["overall"] - m_base["psnr"]["overall"],
            "delta_psnr_reference": m_cond["psnr"]["reference_frame"] - m_base["psnr"]["reference_frame"],
            "delta_ssim": m_cond["ssim"]["overall"] - m_base["ssim"]["overall"],
        })
        entries.append({"clip_id": ref.clip_id, "seed": seed, "latent_path": latent_path})

    seed_log = {
        "master_seed": master_seed,
        "eval_policy": eval_policy.value,
        "encoder_fingerprint": fp_base,
        "entries": entries,
    }
    meta = {"protocol": "fixed-seed-swap", "eval_policy": eval_policy.value,
            "encoder_fingerprint": fp_base}
    rep_base.metadata.update(meta)
    rep_cond.metadata.update(meta)
    return SwapResult(rep_base.finalize(), rep_cond.finalize(), deltas, seed_log)


def rerun_swap_from_seedlog(seed_log: dict, val_refs: list[ClipRef], data_spec: DatasetSpec,
                            vae_cfg: VaeConfig, ref_cfg: RefCondConfig,
                            params_baseline: dict, params_conditioned: dict,
                            injection: str = "attention") -> SwapResult:
    """Replay the swap protocol from persisted seeds and latent files."""
    by_id = {r.clip_id: r for r in val_refs}
    policy = RefPolicy(seed_log["eval_policy"])
    rep_base = MetricsReport()
    rep_cond = MetricsReport()
    deltas = []
    for entry in seed_log["entries"]:
        ref = by_id[entry["clip_id"]]
        clip = realize(ref, data_spec)
        z = np.load(entry["latent_path"]) if entry["latent_path"] else \
            encode_t(Tensor(clip.frames), vae_cfg, params_baseline).data
        clip_rng = np.random.default_rng(np.random.PCG64(entry["seed"]))
        ref_frame, ref_index = select_reference_frame(clip.frames, policy, clip_rng)
        decoded_base = decode_baseline_t(Tensor(z), vae_cfg, params_baseline).data
        decoded_cond = decode_conditioned_t(Tensor(z), ref_frame, vae_cfg, ref_cfg,
                                            params_conditioned, injection).data
        m_base = clip_metrics(clip.frames, decoded_base, ref_index, ref.clip_id, ref.category)
        m_cond = clip_metrics(clip.frames, decoded_cond, ref_index, ref.clip_id, ref.category)
        rep_base.per_clip.append(m_base)
        rep_cond.per_clip.append(m_cond)
        deltas.append({
            "clip_id": ref.clip_id, "category": ref.category,
            "delta_psnr": m_cond["psnr"]["overall"] - m_base["psnr"]["overall"],
            "delta_psnr_reference": m_cond["psnr"]["reference_frame"] - m_base["psnr"]["reference_frame"],
            "delta_ssim": m_cond["ssim"]["overall"] - m_base["ssim"]["overall"],
        })
    return SwapResult(rep_base.finalize(), rep_cond.finalize(), deltas, seed_log)
