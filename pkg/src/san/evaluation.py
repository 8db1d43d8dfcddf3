"""Binarisation, precision/recall, F-beta and dataset-level reports."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BETA = 0.3


class EvalError(ValueError):
    pass


def binarize(saliency: np.ndarray, method: str = "adaptive", t: float | None = None):
    """Threshold a map; returns ``(mask, threshold)``.

    ``adaptive`` uses ``min(1, 2 * mean)``; ``fixed`` uses ``t``.
    """
    if method == "adaptive":
        thr = min(1.0, 2.0 * float(np.mean(saliency)))
    elif method == "fixed":
        if t is None or not 0.0 <= t <= 1.0:
            raise EvalError("fixed threshold must lie in [0, 1]")
        thr = float(t)
    else:
        raise EvalError(f"unknown binarisation method {method!r}")
    return saliency >= thr, thr


def precision_recall(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise EvalError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    positives = int(gt.sum())
    if positives == 0:
        raise EvalError("ground truth has no salient pixels")
    tp = int(np.count_nonzero(pred & gt))
    predicted = int(pred.sum())
    precision = tp / predicted if predicted else 0.0
    return precision, tp / positives


def f_beta(p: float, r: float, beta: float = BETA) -> float:
    b2 = beta * beta
    denom = b2 * p + r
    return (1 + b2) * p * r / denom if denom > 0 else 0.0


@dataclass
class ImageScore:
    id: str
    precision: float
    recall: float
    f_beta: float
    threshold: float


@dataclass
class EvalReport:
    scores: list[ImageScore]
    beta: float = BETA
    binarization: str = "adaptive"
    postprocess: bool = True
    aggregation: str = "mean over images"
    extra: dict = field(default_factory=dict)

    @property
    def mean_f_beta(self) -> float:
        return float(np.mean([s.f_beta for s in self.scores]))

    def to_json(self) -> dict:
        return {"mean_f_beta": self.mean_f_beta, "n_images": len(self.scores),
                "beta": self.beta, "binarization": self.binarization,
                "postprocess": self.postprocess, "aggregation": self.aggregation,
                **self.extra}

    def write(self, directory, stem: str = "report"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "precision", "recall", "f_beta"])
            for s in self.scores:
                w.writerow([s.id, repr(s.precision), repr(s.recall), repr(s.f_beta)])
        payload = self.to_json()
        payload["images"] = [asdict(s) for s in self.scores]
        (directory / f"{stem}.json").write_text(json.dumps(payload, indent=2) + "\n")


def score_map(saliency: np.ndarray, gt: np.ndarray, sample_id: str = "",
              beta: float = BETA, method: str = "adaptive", t: float | None = None) -> ImageScore:
    mask, thr = binarize(saliency, method, t)
    p, r = precision_recall(mask, np.asarray(gt) > 0.5)
    return ImageScore(sample_id, p, r, f_beta(p, r, beta), thr)


def evaluate_maps(maps, samples, beta: float = BETA, method: str = "adaptive",
                  t: float | None = None, postprocess: bool = False) -> EvalReport:
    """Score precomputed (h, w) maps against the samples' masks."""
    if len(samples) == 0:
        raise EvalError("nothing to evaluate")
    scores = [score_map(m, s.mask[0], s.id, beta, method, t) for m, s in zip(maps, samples)]
    scores.sort(key=lambda s: s.id)
    return EvalReport(scores, beta, method if method == "adaptive" else f"fixed({t})",
                      postprocess)


def evaluate_dataset(G, samples, postprocess: bool = True, beta: float = BETA,
                     params=None, method: str = "adaptive", t: float | None = None,
                     batch: int = 8, workers: int = 1) -> EvalReport:
    """Run G over the samples, average channels, optionally post-process, score.

    Post-processing runs on ``workers`` threads; results keep sample order.
    """
    from .postproc import PostprocParams, postprocess_pipeline
    from .training import predict_maps

    if len(samples) == 0:
        raise EvalError("nothing to evaluate")
    params = params if params is not None else PostprocParams()
    raw = predict_maps(G, [s.image for s in samples], batch=batch)
    if postprocess:
        def run(pair):
            return postprocess_pipeline(pair[0].image, pair[1], params)
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            maps = list(pool.map(run, zip(samples, raw)))
    else:
        maps = raw
    return evaluate_maps(maps, samples, beta, method, t, postprocess)
