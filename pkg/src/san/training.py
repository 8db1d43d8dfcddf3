"""Supervised adversarial training of the saliency generator.

Each iteration regenerates synthetic maps with G, trains D to tell the
ground-truth maps' image classes (1..L) apart from synthetic maps (L+1), and
then trains G through a frozen D to have its maps classified as the image's
own class.  ``baseline1/2/3`` modes are the ablations: MSE-only G, a
two-class D, and a D without comparison layers.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import SaliencySample
from .evaluation import evaluate_maps
from .layers import mse_loss, sgd_step, softmax_cross_entropy
from .networks import (D_COMPARISON, D_WIDTHS, G_WIDTHS, Network, build_d_network,
                       build_g_network, save_checkpoint)
from .tensor import Prng, ShapeError

log = logging.getLogger(__name__)

MODES = ("san", "baseline1", "baseline2", "baseline3")


@dataclass
class TrainConfig:
    iterations: int = 20
    d_epochs: int = 6
    g_epochs: int = 2
    batch: int = 16
    g_batch: int = 8
    d_lr0: float = 0.0006
    g_lr0: float = 0.0001
    lr_decay: float = 0.98
    alpha: float = 0.8
    map_dims: int = 9
    num_classes: int | None = None
    seed: int = 0
    mode: str = "san"
    regenerate: str = "batch"  # batch | iteration
    comparison_phase: str = "both"  # both | d | g
    g_widths: tuple[int, ...] = G_WIDTHS
    d_widths: tuple[int, ...] = D_WIDTHS
    comparison_layers: tuple[int, ...] = D_COMPARISON
    leaky_slope: float = 0.2
    snapshot: bool = True

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, not {self.mode!r}")
        for name in ("d_lr0", "g_lr0", "lr_decay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch < 2 or self.batch % 2:
            raise ValueError("batch must be even: half ground truth, half synthetic")
        if self.g_batch < 2:
            raise ValueError("g_batch must be at least 2 for batch normalisation")
        for name in ("iterations", "d_epochs", "g_epochs", "map_dims"):
            if getattr(self, name) < 0 or (name == "map_dims" and self.map_dims < 1):
                raise ValueError(f"{name} out of range")
        if self.regenerate not in ("batch", "iteration"):
            raise ValueError("regenerate must be 'batch' or 'iteration'")
        if self.comparison_phase not in ("both", "d", "g"):
            raise ValueError("comparison_phase must be 'both', 'd' or 'g'")
        return self

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    def add(self, **rec):
        rec["time"] = time.time()
        self.records.append(rec)

    def losses(self, phase: str | None = None) -> list[float]:
        return [r["loss"] for r in self.records if phase is None or r["phase"] == phase]

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cols = ["iteration", "phase", "epoch", "loss", "accuracy", "lr"]
        with open(directory / "trainlog.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        with open(directory / "trainlog.jsonl", "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
            for s in self.snapshots:
                fh.write(json.dumps({"phase": "snapshot", **s}) + "\n")


# -- map helpers --------------------------------------------------------------


def expand_ground_truth(mask: np.ndarray, k: int) -> np.ndarray:
    """Replicate a (n, 1, h, w) mask across ``k`` channels."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise ShapeError(f"expected (n, 1, h, w) mask, got {mask.shape}")
    if mask.min() < 0 or mask.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    return np.ascontiguousarray(np.repeat(mask, k, axis=1))


def average_channels(maps: np.ndarray) -> np.ndarray:
    if maps.ndim != 4 or maps.shape[1] < 1:
        raise ShapeError(f"expected (n, k, h, w) maps, got {maps.shape}")
    return maps.mean(axis=1, keepdims=True, dtype=np.float64).astype(maps.dtype)


def generate_saliency_batch(G: Network, images: np.ndarray) -> np.ndarray:
    """Synthetic maps for a batch of images in G's current mode."""
    if images.ndim != 4:
        raise ShapeError(f"expected (n, c, h, w) images, got {images.shape}")
    return G.forward(images.astype(G.dtype, copy=False))


def predict_maps(G: Network, images, batch: int = 8) -> list[np.ndarray]:
    """Final (h, w) saliency maps from G in eval mode."""
    mode = G.mode
    G.set_mode("eval")
    out = []
    try:
        for i in range(0, len(images), batch):
            x = np.stack(images[i:i + batch])
            out += list(average_channels(generate_saliency_batch(G, x))[:, 0])
    finally:
        G.set_mode(mode)
    return out


# -- steps --------------------------------------------------------------------


def train_d_step(D: Network, gt_maps: np.ndarray, gt_labels, synthetic: np.ndarray,
                 lr: float, use_comparison: bool = True, synthetic_label: int | None = None):
    """One SGD step on D over ``[ground truth; synthetic]``.

    Synthetic rows carry ``synthetic_label`` (default: the last class, L+1).
    Returns ``(loss, accuracy, labels)``.
    """
    m = gt_maps.shape[0]
    if synthetic.shape != gt_maps.shape:
        raise ShapeError("ground-truth and synthetic halves must be pairwise aligned")
    num_classes = D.layers[-1].params["b"].shape[0]
    synthetic_label = num_classes if synthetic_label is None else synthetic_label
    gt_labels = np.asarray(gt_labels, dtype=np.intp)
    if gt_labels.min() < 1 or gt_labels.max() >= num_classes:
        raise ValueError(f"ground-truth labels must lie in [1, {num_classes - 1}]")
    x = np.concatenate([gt_maps, synthetic]).astype(D.dtype, copy=False)
    labels = np.concatenate([gt_labels, np.full(m, synthetic_label, np.intp)])
    D.set_mode("train")
    D.zero_grad()
    for layer in D.comparison_layers():
        layer.clear()
        if use_comparison:
            layer.pairing = (np.arange(m), np.arange(m, 2 * m))
    try:
        logits = D.forward(x)
        loss, grad = softmax_cross_entropy(logits, labels)
        D.backward(grad.astype(D.dtype), need_input_grad=False)
    finally:
        D.clear_references()
    sgd_step(D.parameters(), D.gradients(), lr)
    acc = float(np.mean(np.argmax(logits, axis=1) + 1 == labels))
    return loss, acc, labels


def record_references(D: Network, gt_maps: np.ndarray):
    """No-gradient D pass over ground truth; stores C_g in every comparison layer."""
    D.forward(gt_maps.astype(D.dtype, copy=False))
    for layer in D.comparison_layers():
        layer.record(layer._out)


def train_g_step(G: Network, D: Network, images: np.ndarray, class_labels, lr: float,
                 gt_maps: np.ndarray | None = None, use_comparison: bool = True):
    """One SGD step on G through a frozen D; returns ``(loss, accuracy)``.

    D runs in eval mode so neither its weights nor its running statistics
    change.  ``class_labels`` must be real classes, never the synthetic one.
    """
    num_classes = D.layers[-1].params["b"].shape[0]
    labels = np.asarray(class_labels, dtype=np.intp)
    if labels.min() < 1 or labels.max() >= num_classes:
        raise ValueError(f"G-update labels must lie in [1, {num_classes - 1}]")
    d_mode = D.mode
    D.set_mode("eval")
    D.clear_references()
    try:
        if use_comparison and D.comparison_layers():
            if gt_maps is None:
                raise ValueError("ground-truth maps are required for comparison references")
            record_references(D, gt_maps)
        G.set_mode("train")
        G.zero_grad()
        maps = generate_saliency_batch(G, images)
        logits = D.forward(maps)
        loss, grad = softmax_cross_entropy(logits, labels)
        grad_maps = D.backward(grad.astype(D.dtype), need_input_grad=True)
        G.backward(grad_maps.astype(G.dtype), need_input_grad=False)
    finally:
        D.clear_references()
        D.zero_grad()
        D.set_mode(d_mode)
    sgd_step(G.parameters(), G.gradients(), lr)
    acc = float(np.mean(np.argmax(logits, axis=1) + 1 == labels))
    return loss, acc


def train_g_mse_step(G: Network, images: np.ndarray, gt_maps: np.ndarray, lr: float) -> float:
    """Baseline 1: plain per-pixel MSE between G's maps and the expanded masks."""
    G.set_mode("train")
    G.zero_grad()
    maps = generate_saliency_batch(G, images)
    loss, grad = mse_loss(maps, gt_maps.astype(maps.dtype))
    G.backward(grad.astype(G.dtype), need_input_grad=False)
    sgd_step(G.parameters(), G.gradients(), lr)
    return loss


# -- orchestration ------------------------------------------------------------


def _chunks(order, size):
    return [order[i:i + size] for i in range(0, len(order), size)]


def build_networks(config: TrainConfig, num_classes: int, size: int, prng: Prng):
    G = build_g_network(3, config.map_dims, prng, widths=config.g_widths)
    if config.mode == "baseline1":
        return G, None
    comparison = () if config.mode == "baseline3" else config.comparison_layers
    d_classes = 2 if config.mode == "baseline2" else num_classes + 1
    D = build_d_network(config.map_dims, d_classes, prng, input_size=size,
                        comparison=comparison, alpha=config.alpha,
                        widths=config.d_widths, slope=config.leaky_slope)
    return G, D


def run_training(config: TrainConfig, dataset: list[SaliencySample], out_dir=None,
                 observer: Callable[[str, np.ndarray, np.ndarray], None] | None = None,
                 networks: tuple[Network, Network | None] | None = None):
    """Train according to ``config``; returns ``(G, D, TrainLog)``.

    ``observer(phase, labels, is_synthetic)`` sees the labels of every D and G
    mini-batch.  Checkpoints and the log go to ``out_dir`` when given.
    """
    config.validate()
    if not dataset:
        raise ValueError("empty dataset")
    num_classes = config.num_classes or max(s.label for s in dataset)
    if any(not 1 <= s.label <= num_classes for s in dataset):
        raise ValueError(f"sample labels must lie in 1..{num_classes}")
    size = dataset[0].image.shape[1]
    prng = Prng(config.seed)
    G, D = networks if networks is not None else build_networks(config, num_classes, size, prng)
    shuffle = Prng(config.seed ^ 0x5EED)

    images = np.stack([s.image for s in dataset]).astype(G.dtype)
    gts = expand_ground_truth(np.stack([s.mask for s in dataset]), config.map_dims).astype(G.dtype)
    binary = config.mode == "baseline2"
    labels = np.array([1 if binary else s.label for s in dataset], dtype=np.intp)
    n = len(dataset)
    half = config.batch // 2
    d_epoch = g_epoch = 0
    trainlog = TrainLog()
    out_dir = Path(out_dir) if out_dir is not None else None
    use_cmp_d = config.comparison_phase in ("both", "d")
    use_cmp_g = config.comparison_phase in ("both", "g")

    for it in range(config.iterations):
        t0 = time.time()
        if D is not None:
            if config.regenerate == "iteration":
                G.set_mode("train")
                pool = np.concatenate([generate_saliency_batch(G, images[c])
                                       for c in _chunks(np.arange(n), config.g_batch)])
            for _ in range(config.d_epochs):
                lr = config.d_lr0 * config.lr_decay ** d_epoch
                losses, accs = [], []
                for idx in _chunks(shuffle.permutation(n), half):
                    idx = np.asarray(idx)
                    if config.regenerate == "batch":
                        G.set_mode("train")
                        synth = generate_saliency_batch(G, images[idx])
                    else:
                        synth = pool[idx]
                    loss, acc, lab = train_d_step(
                        D, gts[idx], labels[idx], synth, lr, use_cmp_d,
                        synthetic_label=2 if binary else None)
                    if observer:
                        observer("d", lab, np.arange(len(lab)) >= len(idx))
                    losses.append(loss)
                    accs.append(acc)
                trainlog.add(iteration=it, phase="d", epoch=d_epoch, loss=float(np.mean(losses)),
                             accuracy=float(np.mean(accs)), lr=lr)
                d_epoch += 1
        for _ in range(config.g_epochs):
            lr = config.g_lr0 * config.lr_decay ** g_epoch
            losses, accs = [], []
            for idx in _chunks(shuffle.permutation(n), config.g_batch):
                idx = np.asarray(idx)
                if len(idx) < 2:
                    continue  # batchnorm needs two rows
                if D is None:
                    losses.append(train_g_mse_step(G, images[idx], gts[idx], lr))
                    continue
                loss, acc = train_g_step(G, D, images[idx], labels[idx], lr, gts[idx], use_cmp_g)
                if observer:
                    observer("g", labels[idx], np.zeros(len(idx), bool))
                losses.append(loss)
                accs.append(acc)
            trainlog.add(iteration=it, phase="g" if D is not None else "g_mse", epoch=g_epoch,
                         loss=float(np.mean(losses)),
                         accuracy=float(np.mean(accs)) if accs else float("nan"), lr=lr)
            g_epoch += 1
        if config.snapshot:
            maps = predict_maps(G, [s.image for s in dataset])
            fb = evaluate_maps(maps, dataset).mean_f_beta
            trainlog.snapshots.append({"iteration": it, "train_fbeta": fb})
            log.info("iteration %d: train F-beta %.4f (%.1fs)", it, fb, time.time() - t0)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(G, out_dir / "G.ckpt")
            if D is not None:
                save_checkpoint(D, out_dir / "D.ckpt")
            trainlog.write(out_dir)
    return G, D, trainlog


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
