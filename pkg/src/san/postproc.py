"""Saliency-map post-processing built on SLIC superpixels.

Pipeline: weak-signal filter, SLIC, per-superpixel averaging, a global
colour-contrast refinement, min-max normalisation, and a second filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class PostprocError(ValueError):
    pass


@dataclass(frozen=True)
class PostprocParams:
    weak_fraction: float = 0.2
    slic_k: int = 128
    slic_compactness: float = 10.0
    slic_iters: int = 10
    refine_weight: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.weak_fraction < 1.0:
            raise PostprocError("weak_fraction must lie in [0, 1)")
        if self.slic_k < 2:
            raise PostprocError("slic_k must be at least 2")
        if self.slic_compactness <= 0:
            raise PostprocError("slic_compactness must be positive")
        if self.slic_iters < 1:
            raise PostprocError("slic_iters must be at least 1")
        if not 0.0 <= self.refine_weight <= 1.0:
            raise PostprocError("refine_weight must lie in [0, 1]")


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # (h, w) int, 0..K-1
    mean_lab: np.ndarray  # (K, 3)
    centroid: np.ndarray  # (K, 2) as (x, y)
    count: np.ndarray  # (K,)

    @property
    def num_segments(self) -> int:
        return len(self.count)

    @classmethod
    def from_labels(cls, labels: np.ndarray, lab: np.ndarray) -> "SuperpixelMap":
        h, w = labels.shape
        k = int(labels.max()) + 1
        flat = labels.ravel()
        count = np.bincount(flat, minlength=k)
        if (count == 0).any():
            raise PostprocError("superpixel labels are not consecutive")
        mean_lab = np.stack([np.bincount(flat, lab[c].ravel(), k) for c in range(3)], 1)
        yy, xx = np.mgrid[0:h, 0:w]
        centroid = np.stack([np.bincount(flat, xx.ravel(), k), np.bincount(flat, yy.ravel(), k)], 1)
        return cls(labels, mean_lab / count[:, None], centroid / count[:, None], count)


# -- colour ----------------------------------------------------------------------

_RGB_TO_XYZ = np.array([[0.4124564, 0.3575761, 0.1804375],
                        [0.2126729, 0.7151522, 0.0721750],
                        [0.0193339, 0.1191920, 0.9503041]])
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """(3, h, w) sRGB in [0, 1] to CIELAB under D65, computed in float64."""
    rgb = np.asarray(image, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise PostprocError(f"expected a (3, h, w) image, got {rgb.shape}")
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = np.tensordot(_RGB_TO_XYZ, lin, axes=1) / _WHITE_D65[:, None, None]
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16) / 116)
    return np.stack([116 * f[1] - 16, 500 * (f[0] - f[1]), 200 * (f[1] - f[2])])


# -- SLIC ------------------------------------------------------------------------


def _grid_seeds(h, w, k):
    ny = max(1, round(math.sqrt(k * h / w)))
    nx = max(1, round(k / ny))
    ys = (np.arange(ny) + 0.5) * h / ny - 0.5
    xs = (np.arange(nx) + 0.5) * w / nx - 0.5
    return [(y, x) for y in ys for x in xs]


def _perturb(seeds, lab):
    # shift each seed by the offset to the lowest-gradient pixel in the 3x3
    # neighbourhood of its nearest pixel; unmoved seeds keep exact grid positions
    _, h, w = lab.shape
    p = np.pad(lab, ((0, 0), (1, 1), (1, 1)), mode="edge")
    grad = (((p[:, 1:-1, 2:] - p[:, 1:-1, :-2]) ** 2).sum(0)
            + ((p[:, 2:, 1:-1] - p[:, :-2, 1:-1]) ** 2).sum(0))
    out = []
    for fy, fx in seeds:
        y, x = int(round(fy)), int(round(fx))
        best = (grad[y, x], y, x)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and grad[yy, xx] < best[0]:
                    best = (grad[yy, xx], yy, xx)
        out.append((fy + best[1] - y, fx + best[2] - x, best[1], best[2]))
    return out


def _enforce_connectivity(labels, lab, min_size):
    """Split clusters into 4-connected components and absorb the orphans.

    Each cluster keeps its largest component when that has at least
    ``min_size`` pixels.  Every other component is an orphan and joins the
    adjacent kept segment closest to it in mean CIELAB colour.  Labels are
    renumbered in raster order of first appearance.
    """
    h, w = labels.shape
    comp = np.zeros((h, w), dtype=np.int64)
    n_comp = 0
    four = ndimage.generate_binary_structure(2, 1)
    for seg, sl in enumerate(ndimage.find_objects(labels + 1)):
        if sl is None:
            continue
        sub = labels[sl] == seg
        cl, n = ndimage.label(sub, structure=four)
        comp[sl][sub] = cl[sub] + n_comp
        n_comp += n
    comp -= 1
    flat = comp.ravel()
    size = np.bincount(flat, minlength=n_comp)
    colour = np.stack([np.bincount(flat, c.ravel(), n_comp) for c in lab], 1) / size[:, None]
    owner = np.zeros(n_comp, dtype=np.int64)
    owner[flat] = labels.ravel()
    keep = np.zeros(n_comp, dtype=bool)
    for seg in np.unique(owner):
        ids = np.flatnonzero(owner == seg)
        best = ids[np.argmax(size[ids])]
        keep[best] = size[best] >= min_size
    if not keep.any():
        keep[np.argmax(size)] = True

    pairs = np.concatenate([np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], 1),
                            np.stack([comp[:-1].ravel(), comp[1:].ravel()], 1)])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.concatenate([pairs, pairs[:, ::-1]]), axis=0)
    neighbours = [[] for _ in range(n_comp)]
    for a, b in pairs:
        neighbours[a].append(b)

    # Greedy agglomeration: the smallest orphan group repeatedly joins its
    # colour-nearest neighbour, which may be another orphan group; merged
    # groups carry pooled colour so fragments drift to the region they match.
    group = {c: {"size": int(size[c]), "sum": colour[c] * size[c], "nb": set(neighbours[c])}
             for c in range(n_comp)}
    target = np.arange(n_comp)
    orphans = {c for c in range(n_comp) if not keep[c]}
    while orphans:
        c = min(orphans, key=lambda o: (group[o]["size"], o))
        g = group[c]
        if not g["nb"]:
            raise PostprocError("orphan component with no neighbour")
        mean = g["sum"] / g["size"]
        nb = sorted(g["nb"])
        dest = nb[int(np.argmin([((group[n]["sum"] / group[n]["size"] - mean) ** 2).sum()
                                 for n in nb]))]
        d = group[dest]
        d["size"] += g["size"]
        d["sum"] = d["sum"] + g["sum"]
        d["nb"] |= g["nb"]
        d["nb"] -= {c, dest}
        for n in g["nb"]:
            if n != dest:
                group[n]["nb"].discard(c)
                group[n]["nb"].add(dest)
        target[target == c] = dest
        del group[c]
        orphans.discard(c)

    merged = target[comp]
    _, first = np.unique(merged.ravel(), return_index=True)
    order = np.argsort(first)
    remap = np.empty(n_comp, dtype=np.int64)
    remap[np.unique(merged.ravel())[order]] = np.arange(len(order))
    return remap[merged]


def slic(image: np.ndarray, k: int = 128, compactness: float = 10.0,
         iters: int = 10) -> SuperpixelMap:
    """SLIC superpixels of a (3, h, w) RGB image in [0, 1]."""
    lab = rgb_to_lab(image)
    _, h, w = lab.shape
    n = h * w
    if not 2 <= k <= n:
        raise PostprocError(f"k must lie in [2, {n}], got {k}")
    if iters < 1 or compactness <= 0:
        raise PostprocError("iters must be positive and compactness positive")
    s = math.sqrt(n / k)
    win = int(math.ceil(s))
    seeds = _perturb(_grid_seeds(h, w, k), lab)
    centers = np.array([[*lab[:, py, px], fx, fy] for fy, fx, py, px in seeds],
                       dtype=np.float64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    spatial = (compactness / s) ** 2
    labels = np.full((h, w), -1, dtype=np.int64)

    for _ in range(iters):
        dist = np.full((h, w), np.inf)
        for i, (l, a, b, cx, cy) in enumerate(centers):
            y0, y1 = max(0, int(cy) - win), min(h, int(cy) + win + 1)
            x0, x1 = max(0, int(cx) - win), min(w, int(cx) + win + 1)
            sub = lab[:, y0:y1, x0:x1]
            d = ((sub[0] - l) ** 2 + (sub[1] - a) ** 2 + (sub[2] - b) ** 2
                 + spatial * ((yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2))
            better = d < dist[y0:y1, x0:x1]
            dist[y0:y1, x0:x1][better] = d[better]
            labels[y0:y1, x0:x1][better] = i
        if (labels < 0).any():
            # pixels outside every window go to the spatially nearest centre
            miss = labels < 0
            d2 = ((yy[miss][:, None] - centers[:, 4]) ** 2
                  + (xx[miss][:, None] - centers[:, 3]) ** 2)
            labels[miss] = np.argmin(d2, axis=1)
        flat = labels.ravel()
        cnt = np.bincount(flat, minlength=len(centers))
        feats = [lab[0], lab[1], lab[2], xx, yy]
        sums = np.stack([np.bincount(flat, f.ravel(), len(centers)) for f in feats], 1)
        alive = cnt > 0
        centers[alive] = sums[alive] / cnt[alive, None]

    labels = _enforce_connectivity(labels, lab, max(1, int(n / k / 4)))
    return SuperpixelMap.from_labels(labels, lab)


# -- map operations -----------------------------------------------------------


def threshold_weak(saliency: np.ndarray, fraction: float) -> np.ndarray:
    """Zero every value below ``fraction`` of the map maximum."""
    m = np.asarray(saliency)
    peak = float(m.max()) if m.size else 0.0
    if peak <= 0:
        return m.copy()
    return np.where(m < fraction * peak, 0, m).astype(m.dtype)


def smooth_by_superpixels(saliency: np.ndarray, sp: SuperpixelMap) -> np.ndarray:
    m = np.asarray(saliency, dtype=np.float64)
    if m.shape != sp.labels.shape:
        raise PostprocError(f"map {m.shape} and superpixels {sp.labels.shape} differ in size")
    means = np.bincount(sp.labels.ravel(), m.ravel(), sp.num_segments) / sp.count
    return means[sp.labels]


def segment_contrast(sp: SuperpixelMap) -> np.ndarray:
    """Spatially weighted global colour contrast per segment, scaled to [0, 1]."""
    h, w = sp.labels.shape
    sigma = 0.25 * math.hypot(h, w)
    dlab = np.linalg.norm(sp.mean_lab[:, None] - sp.mean_lab[None], axis=2)
    dpos2 = ((sp.centroid[:, None] - sp.centroid[None]) ** 2).sum(2)
    weight = sp.count[None] / (h * w) * np.exp(-dpos2 / (2 * sigma * sigma))
    return normalize((weight * dlab).sum(1))


def lowlevel_refine(image: np.ndarray, sp: SuperpixelMap, smoothed: np.ndarray,
                    weight: float = 0.5) -> np.ndarray:
    """Blend each segment's value with itself scaled by its colour contrast.

    ``image`` is only checked for alignment; the colour statistics come from
    ``sp``.
    """
    if image.shape[1:] != sp.labels.shape or smoothed.shape != sp.labels.shape:
        raise PostprocError("image, superpixels and map must share a size")
    if not 0.0 <= weight <= 1.0:
        raise PostprocError("refine weight must lie in [0, 1]")
    if weight == 0:
        return np.asarray(smoothed, dtype=np.float64).copy()
    contrast = segment_contrast(sp)[sp.labels]
    return (1 - weight) * smoothed + weight * smoothed * contrast


def normalize(saliency: np.ndarray) -> np.ndarray:
    m = np.asarray(saliency, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def postprocess_pipeline(image: np.ndarray, raw_map: np.ndarray,
                         params: PostprocParams | None = None) -> np.ndarray:
    """Full refinement of a raw (h, w) map in [0, 1]; returns float64 in [0, 1]."""
    params = params or PostprocParams()
    raw = np.asarray(raw_map, dtype=np.float64)
    if raw.ndim != 2 or raw.shape != image.shape[1:]:
        raise PostprocError(f"map {raw.shape} does not match image {image.shape}")
    if raw.min() < 0 or raw.max() > 1:
        raise PostprocError("raw map values must lie in [0, 1]")
    m = threshold_weak(raw, params.weak_fraction)
    sp = slic(image, min(params.slic_k, raw.size), params.slic_compactness, params.slic_iters)
    m = smooth_by_superpixels(m, sp)
    m = lowlevel_refine(image, sp, m, params.refine_weight)
    m = normalize(m)
    return threshold_weak(m, params.weak_fraction)
