"""Toy benchmark runner shared by ``scripts/`` and the acceptance tests.

One run = synthesize the train and test splits, train, infer on every test
image, evaluate. Results carry timings and content digests so repeated runs
can be compared bit for bit.
"""

from __future__ import annotations

import hashlib
import logging
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import Checkpoint, ModelConfig
from .evaluation import EvalResult, evaluate
from .pipeline import InferConfig, TrainConfig, rle_encode, run_inference, train
from .synth import DatasetConfig, generate_dataset

log = logging.getLogger(__name__)

# stride 4 rather than the stride-8 toy default: at 128 px the stride-8 maps
# leave too few cells per object for masks to clear IoU 0.7
BENCH_MODEL = ModelConfig(stride=4)
BENCH_TRAIN = TrainConfig(iterations=2000, ohem=True)


@dataclass
class BenchmarkConfig:
    data_seed: int = 7
    train_count: int = 400
    test_count: int = 100
    model: ModelConfig = field(default_factory=lambda: replace(BENCH_MODEL))
    train: TrainConfig = field(default_factory=lambda: replace(BENCH_TRAIN))
    infer: InferConfig = field(default_factory=InferConfig)

    def splits(self):
        """Train split from ``data_seed``; test split from ``data_seed + 1``."""
        tr = generate_dataset(DatasetConfig(seed=self.data_seed, count=self.train_count))
        te = generate_dataset(DatasetConfig(seed=self.data_seed + 1, count=self.test_count))
        return tr, te

    def variant(self, head_mode=None, ohem=None, seed=None, iterations=None) -> "BenchmarkConfig":
        m, t = self.model, self.train
        if head_mode is not None:
            m = replace(m, head_mode=head_mode, k=1 if head_mode == "translation_invariant" else m.k)
        if ohem is not None:
            t = replace(t, ohem=ohem)
        if seed is not None:
            t = replace(t, seed=seed)
        if iterations is not None:
            t = replace(t, iterations=iterations)
        return replace(self, model=m, train=t)


@dataclass
class BenchmarkResult:
    result: EvalResult
    train_seconds: float
    infer_seconds: float
    iterations: int
    loss_rows: list
    param_digest: str
    detection_digest: str

    @property
    def seconds_per_iteration(self) -> float:
        return self.train_seconds / self.iterations

    def summary(self) -> str:
        r = self.result
        return (f"mAP@0.5={r.map50:.4f} mAP@0.7={r.map70:.4f} mAP@[.5:.95]={r.map_coco:.4f} "
                f"train={self.train_seconds:.0f}s ({1000 * self.seconds_per_iteration:.1f} ms/iter) "
                f"infer={self.infer_seconds:.0f}s")


def _param_digest(ckpt: Checkpoint) -> str:
    h = hashlib.sha256()
    for name in sorted(ckpt.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(ckpt.params[name].numpy()).tobytes())
    return h.hexdigest()


def _detection_digest(dets: dict) -> str:
    h = hashlib.sha256()
    for i in sorted(dets):
        for d in dets[i]:
            h.update(f"{i} {d.category} {d.score!r} {np.asarray(d.box).tolist()} {rle_encode(d.mask)}\n".encode())
    return h.hexdigest()


def run_benchmark(cfg: BenchmarkConfig, data=None, progress=None) -> BenchmarkResult:
    train_set, test_set = data if data is not None else cfg.splits()
    t0 = time.perf_counter()
    ckpt, rows = train(train_set, cfg.model, cfg.train, progress=progress)
    t1 = time.perf_counter()
    dets = {s.sample_id: run_inference(s.image, ckpt, cfg.infer) for s in test_set}
    t2 = time.perf_counter()
    gt = {s.sample_id: (s.masks, s.labels) for s in test_set}
    return BenchmarkResult(
        result=evaluate(dets, gt),
        train_seconds=t1 - t0,
        infer_seconds=t2 - t1,
        iterations=cfg.train.iterations,
        loss_rows=rows,
        param_digest=_param_digest(ckpt),
        detection_digest=_detection_digest(dets),
    )


ABLATION_VARIANTS = {
    "joint": dict(head_mode="joint"),
    "separate": dict(head_mode="separate"),
    "translation_invariant": dict(head_mode="translation_invariant"),
    "joint_no_ohem": dict(head_mode="joint", ohem=False),
}


def run_ablation(base: BenchmarkConfig, seeds=(0, 1, 2), variants=None, progress=None) -> dict:
    """``{variant: [BenchmarkResult per seed]}``; the data splits are shared."""
    variants = variants or list(ABLATION_VARIANTS)
    data = base.splits()
    out = {}
    for name in variants:
        out[name] = []
        for s in seeds:
            cfg = base.variant(seed=s, **ABLATION_VARIANTS[name])
            r = run_benchmark(cfg, data=data, progress=progress)
            log.info("%s seed %d: %s", name, s, r.summary())
            out[name].append(r)
    return out


def median_map50(results) -> float:
    return statistics.median(r.result.map50 for r in results)
