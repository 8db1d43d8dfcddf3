"""Acceptance criteria 1-8, one test each.

Every test records a PASS/FAIL line (see conftest.py) that is echoed in the
terminal summary.  Criterion 6 trains real networks and takes several minutes.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from conftest import record
from san import training
from san.cli import build_run_config, main, parse_config_text
from san.dataset import gen_synthetic_dataset
from san.evaluation import evaluate_dataset, f_beta, precision_recall
from san.gradcheck import COMPARISON_ALPHAS, TOLERANCE, run_gradcheck
from san.layers import Conv2d, ConvComparison
from san.networks import (build_d_network, build_g_network, checkpoint_bytes, load_checkpoint,
                          save_checkpoint)
from san.postproc import postprocess_pipeline, slic
from san.tensor import Prng
from san.training import expand_ground_truth, generate_saliency_batch, run_training

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def desk_config(name, **overrides):
    values = parse_config_text((CONFIGS / name).read_text(), name)
    return build_run_config(values, {k: str(v) for k, v in overrides.items()}).train


def desk_data():
    train = gen_synthetic_dataset(48, 3, 64, Prng(7))
    test = gen_synthetic_dataset(16, 3, 64, Prng(8))
    return train, test


# -- 1 ------------------------------------------------------------------------------


def test_criterion_1_gradcheck_suite():
    t0 = time.perf_counter()
    results = run_gradcheck(seed=0, alphas=COMPARISON_ALPHAS)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.error)
    kinds = {r.layer for r in results}
    required = {"conv", "conv_stride2", "batchnorm", "leaky_relu", "sigmoid", "fully_connected",
                "softmax_cross_entropy"} | {f"conv_comparison(alpha={a})" for a in (0.0, 0.3, 0.8, 1.0)}
    ok = all(r.error < TOLERANCE for r in results) and required <= kinds and elapsed < 60
    record(1, ok, f"{len(results)} checks, worst {worst.layer}/{worst.tensor} "
                  f"{worst.error:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------


def _comparison_case(alpha):
    prng = Prng(17)
    layer = ConvComparison(3, 4, 3, 1, prng, np.float64, alpha=alpha)
    plain = Conv2d(3, 4, 3, 1, None, np.float64)
    plain.params = {k: v.copy() for k, v in layer.params.items()}
    x = prng.normal(2 * 3 * 36).reshape(2, 3, 6, 6)
    ref = prng.normal(2 * 4 * 36).reshape(2, 4, 6, 6)
    g_u = prng.normal(2 * 4 * 36).reshape(2, 4, 6, 6)
    layer.record(ref)
    out = layer.forward(x)
    plain.forward(x)
    gi = layer.backward(g_u.copy())
    g_c = out - ref
    g_hat = g_c * (np.sqrt(np.sum(np.square(g_u))) / np.sqrt(np.sum(np.square(g_c))))
    return layer, plain, gi, g_u, g_hat


def test_criterion_2_blend_limits():
    layer, plain, gi, g_u, _ = _comparison_case(0.0)
    zero_ok = (np.array_equal(gi, plain.backward(g_u.copy()))
               and all(np.array_equal(layer.grads[k], plain.grads[k]) for k in ("w", "b")))
    layer, _, _, g_u, g_hat = _comparison_case(1.0)
    one_ok = np.array_equal(layer.last_output_grad, g_hat)
    norm_gap = abs(np.linalg.norm(layer.last_output_grad) - np.linalg.norm(g_u))
    layer, _, _, g_u, g_hat = _comparison_case(0.8)
    dev = float(np.max(np.abs(layer.last_output_grad - (0.2 * g_u + 0.8 * g_hat))))
    ok = zero_ok and one_ok and norm_gap < 1e-9 and dev < 1e-12
    record(2, ok, f"alpha=0 bitwise {zero_ok}, alpha=1 exact {one_ok}, alpha=0.8 max dev {dev:.1e}")
    assert ok


# -- 3 ------------------------------------------------------------------------------


def _confusion_f_beta(pred, gt, beta=0.3):
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn)
    d = beta * beta * p + r
    return (1 + beta * beta) * p * r / d if d else 0.0


def test_criterion_3_f_beta_oracle():
    prng = Prng(33)
    mismatches = 0
    for _ in range(1000):
        pred = prng.uniform(256).reshape(16, 16) < prng.random()
        gt = prng.uniform(256).reshape(16, 16) < prng.random()
        gt[prng.below(16), prng.below(16)] = True
        mismatches += f_beta(*precision_recall(pred, gt)) != _confusion_f_beta(pred, gt)
    grid = np.linspace(0, 1, 101)
    violations = 0
    for a in grid:
        for b in grid:
            if a > b > 0:
                violations += not f_beta(a, b) > f_beta(b, a)
            elif a > b == 0:
                violations += not f_beta(a, b) == f_beta(b, a) == 0.0
    ok = mismatches == 0 and violations == 0
    record(3, ok, f"{mismatches} oracle mismatches in 1000 pairs, "
                  f"{violations} emphasis violations on 101x101")
    assert ok


# -- 4 ------------------------------------------------------------------------------


def _natural_image(seed):
    rng = np.random.default_rng(seed)
    img = np.stack([ndimage.gaussian_filter(rng.random((128, 128)), 3) for _ in range(3)])
    return (img - img.min()) / (img.max() - img.min())


def _edges(a):
    e = np.zeros(a.shape[-2:], bool)
    dx = a[..., :, :-1] != a[..., :, 1:]
    dy = a[..., :-1, :] != a[..., 1:, :]
    if a.ndim == 3:
        dx, dy = dx.any(0), dy.any(0)
    e[:, :-1] |= dx
    e[:, 1:] |= dx
    e[:-1] |= dy
    e[1:] |= dy
    return e


def test_criterion_4_slic():
    t0 = time.perf_counter()
    counts, partition_ok, connected_ok = [], True, True
    for seed in range(20):
        sp = slic(_natural_image(seed), 64, 10.0, 10)
        L = sp.labels
        k = sp.num_segments
        counts.append(k)
        partition_ok &= (L.min() == 0 and L.max() == k - 1
                         and np.bincount(L.ravel(), minlength=k).sum() == L.size
                         and (np.bincount(L.ravel(), minlength=k) > 0).all())
        objects = ndimage.find_objects(L + 1)
        for s, box in enumerate(objects):
            _, n = ndimage.label(L[box] == s)
            connected_ok &= n == 1
    alignments = []
    for axis in (1, 2):
        img = np.zeros((3, 128, 128))
        if axis == 1:
            img[:, 64:] = 1.0
        else:
            img[:, :, 64:] = 1.0
        seg = _edges(slic(img, 2).labels)
        alignments.append(float((seg & _edges(img)).sum() / max(1, seg.sum())))
    elapsed = time.perf_counter() - t0
    count_ok = all(0.8 * 64 <= c <= 1.2 * 64 for c in counts)
    ok = partition_ok and connected_ok and count_ok and min(alignments) >= 0.95 and elapsed < 30
    record(4, ok, f"segments {min(counts)}..{max(counts)}, alignment {min(alignments):.3f}, "
                  f"{elapsed:.1f}s")
    assert ok


# -- 5 ------------------------------------------------------------------------------


def test_criterion_5_architecture():
    G = build_g_network(3, 9, Prng(0))
    y = G.forward(Prng(1).uniform(2 * 3 * 64 * 64).reshape(2, 3, 64, 64).astype(np.float32))
    D = build_d_network(9, 21, Prng(2))
    D.set_mode("eval")
    h = Prng(3).uniform(9 * 64 * 64).reshape(1, 9, 64, 64).astype(np.float32)
    for layer in D.layers[:-1]:
        h = layer.forward(h)
    logits = D.layers[-1].forward(h)
    n_cmp = len(D.comparison_layers())
    ok = (y.shape == (2, 9, 64, 64) and y.min() > 0 and y.max() < 1 and logits.shape == (1, 21)
          and n_cmp == 3 and h.shape == (1, 128, 4, 4))
    record(5, ok, f"G out {y.shape}, D logits {logits.shape[1]}, {n_cmp} comparison layers, "
                  f"pre-FC {h.shape}")
    assert ok


# -- 6 ------------------------------------------------------------------------------


def _train_mse(G, samples):
    G.set_mode("eval")
    images = np.stack([s.image for s in samples])
    gts = expand_ground_truth(np.stack([s.mask for s in samples]), 9)
    errs = [np.mean((generate_saliency_batch(G, images[i:i + 8]) - gts[i:i + 8]) ** 2)
            for i in range(0, len(samples), 8)]
    return float(np.mean(errs))


def _noisy_fixture_improvement():
    samples = gen_synthetic_dataset(50, 3, 64, Prng(11))
    prng = Prng(3)
    improved = 0
    for s in samples:
        gt = s.mask[0].astype(np.float64)
        bg = gt < 0.5
        noisy = gt.copy()
        noisy[bg] = 0.3 * prng.uniform(int(bg.sum()))
        out = postprocess_pipeline(s.image, noisy)
        improved += out[bg].mean() < noisy[bg].mean()
    return improved / len(samples)


@pytest.mark.slow
def test_criterion_6_desk_scale_training():
    t0 = time.perf_counter()
    train, test = desk_data()

    b1_cfg = desk_config("desk_baseline1.cfg")
    G1, _, _ = run_training(b1_cfg, train)
    mse = _train_mse(G1, train)
    epochs = b1_cfg.iterations * b1_cfg.g_epochs

    san_cfg = desk_config("desk_san.cfg")
    G, _, log = run_training(san_cfg, train)
    curve = [s["train_fbeta"] for s in log.snapshots]
    best_train = max(curve)
    with_pp = evaluate_dataset(G, test, postprocess=True).mean_f_beta
    without_pp = evaluate_dataset(G, test, postprocess=False).mean_f_beta
    fixture_rate = _noisy_fixture_improvement()
    elapsed = time.perf_counter() - t0

    a_ok = mse < 0.03 and epochs <= 200
    b_ok = best_train >= 0.70 and len(curve) <= 20 and with_pp >= 0.60
    c_ok = with_pp >= without_pp - 0.02 and fixture_rate >= 0.90
    ok = a_ok and b_ok and c_ok and elapsed < 20 * 60
    record(6, ok, f"(a) baseline1 MSE {mse:.4f} after {epochs} epochs; "
                  f"(b) SAN train F best {best_train:.3f} last {curve[-1]:.3f} over {len(curve)} it, test F+pp {with_pp:.3f}; "
                  f"(c) test F raw {without_pp:.3f}, fixture {fixture_rate:.0%}; "
                  f"{elapsed / 60:.1f} min")
    assert a_ok, f"baseline1 MSE {mse}"
    assert b_ok, f"SAN train curve {curve}, test with post-processing {with_pp}"
    assert c_ok
    assert elapsed < 20 * 60


# -- 7 ------------------------------------------------------------------------------


def test_criterion_7_determinism(tmp_path):
    train = gen_synthetic_dataset(16, 3, 32, Prng(5))
    cfg = desk_config("desk_san.cfg", iterations=1, snapshot="false")
    first = run_training(cfg, train)[2].losses()
    second = run_training(cfg, train)[2].losses()
    losses_ok = first == second and len(first) > 0

    G = build_g_network(3, 9, Prng(4))
    save_checkpoint(G, tmp_path / "a.ckpt")
    loaded = load_checkpoint(tmp_path / "a.ckpt", build_g_network(3, 9, Prng(99)))
    save_checkpoint(loaded, tmp_path / "b.ckpt")
    ckpt_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    trees = []
    for d in ("x", "y"):
        assert main(["gen-data", "--out", str(tmp_path / d), "--n", "48", "--seed", "7"]) == 0
        trees.append({p.relative_to(tmp_path / d): p.read_bytes()
                      for p in sorted((tmp_path / d).rglob("*")) if p.is_file()})
    data_ok = trees[0] == trees[1] and len(trees[0]) > 96
    ok = losses_ok and ckpt_ok and data_ok
    record(7, ok, f"losses identical {losses_ok}, checkpoint bytes identical {ckpt_ok}, "
                  f"gen-data identical {data_ok}")
    assert ok


# -- 8 ------------------------------------------------------------------------------


def test_criterion_8_labeling_protocol(monkeypatch):
    train = gen_synthetic_dataset(12, 3, 32, Prng(9))
    L = 3
    d_batches, g_batches, frozen = [], [], []
    original = training.train_g_step

    def watched(G, D, *args, **kw):
        before = [p.copy() for p in D.parameters()]
        out = original(G, D, *args, **kw)
        frozen.append(all(np.array_equal(a, b) for a, b in zip(before, D.parameters())))
        return out

    def observer(phase, labels, synthetic):
        (d_batches if phase == "d" else g_batches).append((labels.copy(), synthetic.copy()))

    monkeypatch.setattr(training, "train_g_step", watched)
    cfg = desk_config("desk_san.cfg", iterations=2, snapshot="false",
                      g_widths="4,8,4", d_widths=",".join(["8"] * 15))
    run_training(cfg, train, observer=observer)

    d_ok = all((lab[syn] == L + 1).all() and ((lab[~syn] >= 1) & (lab[~syn] <= L)).all()
               and syn.sum() == (~syn).sum() for lab, syn in d_batches)
    g_ok = all((lab <= L).all() and not syn.any() for lab, syn in g_batches)
    # the same check at the full label width
    D = build_d_network(9, 21, Prng(0), input_size=32, widths=(8,) * 15)
    _, _, labels = training.train_d_step(D, np.ones((2, 9, 32, 32), np.float32), [1, 20],
                                         np.zeros((2, 9, 32, 32), np.float32), 1e-4)
    wide_ok = labels.tolist() == [1, 20, 21, 21]
    frozen_ok = len(frozen) > 0 and all(frozen)
    ok = d_ok and g_ok and frozen_ok and wide_ok and d_batches and g_batches
    record(8, bool(ok), f"{len(d_batches)} D batches, {len(g_batches)} G batches, "
                        f"D frozen across {len(frozen)} G updates {frozen_ok}")
    assert ok
