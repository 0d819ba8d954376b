#!/usr/bin/env python3
"""Time one training step at each curriculum stage (budget planning)."""
from __future__ import annotations

import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from refvae.refcond import RefCondConfig  # noqa: E402
from refvae.synthdata import DatasetSpec, build_dataset  # noqa: E402
from refvae.training import (  # noqa: E402
    CurriculumSpec,
    DropoutSpec,
    OptimizerSpec,
    RefPolicy,
    StageSpec,
    pretrain_baseline,
    train_refdecoder,
)
from refvae.vae import VaeConfig  # noqa: E402


def main() -> None:
    spec = DatasetSpec(n_train=4, n_val=2, frames=17, height=32, width=64, master_seed=1)
    train, _ = build_dataset(spec)
    cfg = VaeConfig()
    baseline = None
    for frames, steps in ((5, 8), (17, 4)):
        cur = CurriculumSpec((StageSpec(frames, 32, 64, steps),))
        opt = OptimizerSpec(total_steps=steps, warmup_steps=1)
        t0 = time.perf_counter()
        baseline, _, _ = pretrain_baseline(train, spec, cfg, cur, opt, seed=0)
        print(f"pretrain step @{frames:>2}f: {(time.perf_counter() - t0) / steps * 1e3:6.0f} ms")
    rcfg = RefCondConfig()
    for frames, steps in ((5, 8), (17, 4)):
        cur = CurriculumSpec((StageSpec(frames, 32, 64, steps),))
        opt = OptimizerSpec(total_steps=steps, warmup_steps=1)
        t0 = time.perf_counter()
        train_refdecoder(baseline, train, spec, cfg, rcfg, cur, opt,
                         DropoutSpec(), RefPolicy.random_frame, seed=1)
        print(f"finetune step @{frames:>2}f: {(time.perf_counter() - t0) / steps * 1e3:6.0f} ms")


if __name__ == "__main__":
    main()
