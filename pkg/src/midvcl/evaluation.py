"""Downstream evaluation of frozen representations."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from scipy import stats
from scipy.special import gammaln

from .encoder import INPUT_MEAN, INPUT_STD
from .errors import InvalidInputError
from .shapes import corrupt

# -- linear probe ------------------------------------------------------------


@dataclass
class LinearHead:
    weights: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)
    mean: np.ndarray  # (D,) feature standardisation
    std: np.ndarray
    classes: np.ndarray  # label value of each output column

    def scores(self, features):
        z = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return z @ self.weights + self.bias

    def predict(self, features):
        return self.classes[np.argmax(self.scores(features), axis=1)]

    def as_torch(self):
        """Same map as ``scores`` as a float32 torch module."""
        layer = nn.Linear(len(self.mean), len(self.classes))
        with torch.no_grad():
            w = self.weights / self.std[:, None]
            layer.weight.copy_(torch.from_numpy(w.T.copy()).float())
            layer.bias.copy_(torch.from_numpy(self.bias - self.mean @ w).float())
        return layer


@dataclass
class ProbeResult:
    top1: float
    top5: float
    per_class_accuracy: np.ndarray
    label_kind: str
    head: LinearHead = field(repr=False, default=None)


def _topk_accuracy(scores, labels_idx, k):
    k = min(k, scores.shape[1])
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean((top == labels_idx[:, None]).any(axis=1)))


def train_linear_head(features, labels, epochs=100, lr=1.0, weight_decay=1e-4, seed=0):
    """Softmax regression by full-batch gradient descent with a cosine learning rate."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise InvalidInputError("a probe needs at least two classes")
    y_idx = np.searchsorted(classes, y)
    mean = x.mean(0)
    std = x.std(0) + 1e-6
    z = (x - mean) / std
    n, d = z.shape
    c = len(classes)
    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal((d, c))
    b = np.zeros(c)
    onehot = np.eye(c)[y_idx]
    for epoch in range(epochs):
        step = lr * 0.5 * (1 + math.cos(math.pi * epoch / epochs))
        logits = z @ w + b
        logits -= logits.max(1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(1, keepdims=True)
        g = (p - onehot) / n
        w -= step * (z.T @ g + weight_decay * w)
        b -= step * g.sum(0)
    return LinearHead(weights=w, bias=b, mean=mean, std=std, classes=classes)


def joint_labels(shape_labels, texture_labels):
    """One class per (shape, texture) cell."""
    shape_labels = np.asarray(shape_labels)
    texture_labels = np.asarray(texture_labels)
    return shape_labels * (int(texture_labels.max()) + 1) + texture_labels


def linear_probe(features, labels, splits, epochs=100, lr=1.0, seed=0, label_kind="shape"):
    """Fit a linear classifier on the train split, report top-1/top-5 on val."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    splits = np.asarray(splits)
    tr = splits == "train"
    va = splits == "val"
    missing = set(np.unique(labels)) - set(np.unique(labels[tr]))
    if missing:
        raise InvalidInputError(f"classes {sorted(missing)} are absent from the train split")
    head = train_linear_head(features[tr], labels[tr], epochs=epochs, lr=lr, seed=seed)
    return evaluate_head(head, features[va], labels[va], label_kind)


def evaluate_head(head, features, labels, label_kind="shape"):
    scores = head.scores(features)
    labels = np.asarray(labels)
    idx = np.searchsorted(head.classes, labels)
    pred = np.argmax(scores, axis=1)
    per_class = np.array([
        float(np.mean(pred[idx == j] == j)) if np.any(idx == j) else float("nan")
        for j in range(len(head.classes))
    ])
    return ProbeResult(top1=_topk_accuracy(scores, idx, 1), top5=_topk_accuracy(scores, idx, 5),
                       per_class_accuracy=per_class, label_kind=label_kind, head=head)


# -- adjusted mutual information ---------------------------------------------


def _contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def expected_mutual_information(row_sums, col_sums):
    """E[MI] under the hypergeometric model of random partitions with fixed marginals."""
    n = int(np.sum(row_sums))
    emi = 0.0
    lg_n = gammaln(n + 1)
    for a in row_sums:
        for b in col_sums:
            lo = max(1, a + b - n)
            hi = min(a, b)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term = (nij / n) * (np.log(n) + np.log(nij) - np.log(a) - np.log(b))
            log_p = (gammaln(a + 1) + gammaln(b + 1) + gammaln(n - a + 1) + gammaln(n - b + 1)
                     - lg_n - gammaln(nij + 1) - gammaln(a - nij + 1) - gammaln(b - nij + 1)
                     - gammaln(n - a - b + nij + 1))
            emi += float(np.sum(term * np.exp(log_p)))
    return emi


def ami(assignments_a, assignments_b):
    """Adjusted mutual information with arithmetic-mean normalisation.

    Partitions identical up to relabeling score exactly 1.0 (this covers two
    single-cluster labelings); any other pair with a vanishing normaliser
    scores 0.0.
    """
    a = np.asarray(assignments_a)
    b = np.asarray(assignments_b)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("assignment vectors must be 1-D and of equal length")
    if len(a) < 2:
        raise InvalidInputError("need at least two items")
    table = _contingency(a, b)
    rows = table.sum(1)
    cols = table.sum(0)
    identical = table.shape[0] == table.shape[1] == int((table > 0).sum())
    if identical:
        return 1.0  # MI equals both entropies, exactly
    n = len(a)
    nz = table[table > 0].astype(np.float64)
    outer = np.outer(rows, cols)[table > 0].astype(np.float64)
    mi = float(np.sum(nz / n * (np.log(nz) + np.log(n) - np.log(outer))))
    h_mean = 0.5 * (_entropy(rows) + _entropy(cols))
    emi = expected_mutual_information(rows, cols)
    denom = h_mean - emi
    if abs(denom) < 1e-15:
        return 0.0
    return float((mi - emi) / denom)


def ami_trajectory(run_dir, label_kind="shape", k=None):
    """AMI between each epoch's image-embedding clustering and ground-truth labels.

    ``k`` selects the clustering (default: the largest K in the snapshot).
    """
    run_dir = Path(run_dir)
    snaps = sorted((run_dir / "banks").glob("epoch_*.npz"))
    if not snaps:
        raise FileNotFoundError(f"no bank snapshots under {run_dir / 'banks'}")
    with np.load(run_dir / "labels.npz") as lab:
        labels = lab[label_kind]
    out = []
    for path in snaps:
        epoch = int(path.stem.split("_")[1])
        with np.load(path) as snap:
            ks = list(snap["image_k"])
            chosen = max(ks) if k is None else k
            if chosen not in ks:
                raise InvalidInputError(f"snapshot {path.name} has no clustering with K={chosen}")
            assign = snap[f"image_assign_{ks.index(chosen)}"]
        out.append((epoch, ami(assign, labels)))
    return out


# -- shape bias --------------------------------------------------------------


@dataclass
class ShapeBiasResult:
    shape_fraction: float
    texture_fraction: float
    per_shape_class_fractions: dict
    n_decisive: int
    n_trials: int


def shape_bias_from_predictions(predictions, stimuli):
    """Fraction of decisive cue-conflict trials that follow shape.

    Category ``c`` stands for shape class ``c`` and its paired texture class
    ``c``.  A trial is decisive when the prediction equals the stimulus's
    shape or texture class; other trials only count toward ``n_trials``.
    """
    pred = np.asarray(predictions)
    shape = np.array([s.shape_label for s in stimuli])
    texture = np.array([s.texture_label for s in stimuli])
    hit_shape = pred == shape
    hit_texture = pred == texture
    decisive = hit_shape | hit_texture
    n_decisive = int(decisive.sum())
    if n_decisive == 0:
        raise InvalidInputError("no decisive trials: every prediction matched neither cue")
    shape_fraction = float(hit_shape.sum() / n_decisive)
    per_class = {}
    for c in np.unique(shape):
        sel = decisive & (shape == c)
        per_class[int(c)] = float(hit_shape[sel].sum() / sel.sum()) if sel.any() else float("nan")
    return ShapeBiasResult(shape_fraction=shape_fraction, texture_fraction=1.0 - shape_fraction,
                           per_shape_class_fractions=per_class, n_decisive=n_decisive, n_trials=len(pred))


def paired_category_samples(samples):
    """Samples whose texture is the one paired with their shape (label equality)."""
    return [x for x in samples if x.shape_label == x.texture_label]


def train_category_probe(features, samples, epochs=100, lr=1.0, seed=0):
    """Head over categories, fitted on shape/texture-consistent train samples."""
    idx = [i for i, x in enumerate(samples) if x.shape_label == x.texture_label and x.split == "train"]
    if not idx:
        raise InvalidInputError("no shape/texture-consistent training samples")
    labels = np.array([samples[i].shape_label for i in idx])
    return train_linear_head(np.asarray(features)[idx], labels, epochs=epochs, lr=lr, seed=seed)


def shape_bias(checkpoint_path, head, stimuli):
    from .trainer import load_state
    from .encoder import encode

    state, _, _ = load_state(checkpoint_path)
    feats = encode(state, np.stack([s.image for s in stimuli]), "query")
    return shape_bias_from_predictions(head.predict(feats), stimuli)


# -- out-of-distribution accuracy --------------------------------------------

DEFAULT_GRID = tuple((kind, s) for kind in ("noise", "blur", "contrast", "grayscale", "highpass")
                     for s in range(1, 6))


CORRUPTION_KINDS = ("identity", "noise", "blur", "contrast", "grayscale", "highpass")


def validate_grid(grid):
    for kind, severity in grid:
        if kind not in CORRUPTION_KINDS:
            raise InvalidInputError(f"unknown corruption kind {kind!r}; choose from {CORRUPTION_KINDS}")
        if not 1 <= int(severity) <= 5:
            raise InvalidInputError(f"severity {severity} outside 1..5")


def ood_accuracy_from_encoder(embed, head, samples, grid=DEFAULT_GRID, seed=0, label_kind="shape"):
    validate_grid(grid)
    labels = np.array([getattr(x, f"{label_kind}_label") for x in samples])
    rows = []
    for kind, severity in grid:
        images = np.stack([corrupt(x.image, kind, severity, seed=[seed, i, severity])
                           for i, x in enumerate(samples)])
        acc = float(np.mean(head.predict(embed(images)) == labels))
        rows.append({"kind": kind, "severity": int(severity), "accuracy": acc})
    return {"cells": rows, "macro_mean": float(np.mean([r["accuracy"] for r in rows]))}


def ood_accuracy(checkpoint_path, head, samples, grid=DEFAULT_GRID, seed=0, label_kind="shape"):
    """Accuracy of a clean-trained head on each (corruption, severity) cell."""
    from .trainer import load_state
    from .encoder import encode

    state, _, _ = load_state(checkpoint_path)
    return ood_accuracy_from_encoder(lambda imgs: encode(state, imgs, "query"), head, samples,
                                     grid, seed, label_kind)


def paired_comparison(table_a, table_b):
    """Per-cell accuracy differences (a - b) and a paired t-test across cells."""
    key = lambda r: (r["kind"], r["severity"])
    a = {key(r): r["accuracy"] for r in table_a["cells"]}
    b = {key(r): r["accuracy"] for r in table_b["cells"]}
    if set(a) != set(b):
        raise InvalidInputError("tables cover different corruption cells")
    cells = sorted(a)
    diffs = np.array([a[c] - b[c] for c in cells])
    if np.all(diffs == 0):
        t_stat, p = 0.0, 1.0
    else:
        res = stats.ttest_rel([a[c] for c in cells], [b[c] for c in cells])
        t_stat, p = float(res.statistic), float(res.pvalue)
        if not np.isfinite(p):
            t_stat, p = float(np.sign(diffs.mean()) * np.inf), 0.0
    return {
        "cells": [{"kind": c[0], "severity": c[1], "difference": float(d)} for c, d in zip(cells, diffs)],
        "mean_difference": float(diffs.mean()),
        "sem": float(diffs.std(ddof=1) / np.sqrt(len(diffs))) if len(diffs) > 1 else 0.0,
        "t_statistic": t_stat,
        "p_value": p,
    }


# -- SmoothGrad --------------------------------------------------------------


class ProbeModel(nn.Module):
    """Raw [0, 1] image batch -> class scores, through the query encoder and a linear head."""

    def __init__(self, state, head):
        super().__init__()
        self.encoder = state.query
        self.linear = head.as_torch()
        self.size = state.config.input_size
        self.eval()

    def forward(self, x):
        if x.shape[-2:] != (self.size, self.size):
            x = nn.functional.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        return self.linear(self.encoder((x - INPUT_MEAN) / INPUT_STD))


def smoothgrad_checkpoint(checkpoint_path, head, img, n_samples=25, noise_sigma=0.1, seed=0):
    from .trainer import load_state

    state, _, _ = load_state(checkpoint_path)
    return smoothgrad(ProbeModel(state, head), img, n_samples, noise_sigma, seed)


def smoothgrad(model, img, n_samples=25, noise_sigma=0.1, seed=0, target=None):
    """Mean absolute input gradient of the top-class score under Gaussian input noise.

    ``model`` maps a (B, 3, H, W) tensor in [0, 1] to class scores.  The map
    is max-aggregated over channels and min-max scaled to [0, 1]; an all-zero
    gradient gives an all-zero map.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    if noise_sigma < 0:
        raise InvalidInputError("noise_sigma must be non-negative")
    x = torch.as_tensor(np.asarray(img), dtype=torch.float32).permute(2, 0, 1)[None]
    if target is None:
        with torch.no_grad():
            target = int(model(x).argmax(1)[0])
    if noise_sigma == 0:
        n_samples = 1
    gen = torch.Generator().manual_seed(int(seed))
    total = torch.zeros_like(x)
    for _ in range(n_samples):
        noisy = x + noise_sigma * torch.randn(x.shape, generator=gen) if noise_sigma > 0 else x.clone()
        noisy.requires_grad_(True)
        score = model(noisy)[0, target]
        (grad,) = torch.autograd.grad(score, noisy)
        total += grad.abs()
    sal = (total / n_samples)[0].max(0).values.double().numpy()
    lo, hi = sal.min(), sal.max()
    if hi - lo <= 0:
        return np.zeros_like(sal)
    return (sal - lo) / (hi - lo)


# -- reports and plots -------------------------------------------------------


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return to_jsonable({k: getattr(obj, k) for k in obj.__dataclass_fields__ if k != "head"})
    return obj


def write_report(path, report):
    """JSON report; floats are written with round-trip precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(report), indent=2, sort_keys=True) + "\n")
    return path


def read_report(path):
    return json.loads(Path(path).read_text())


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_curves(series, path, ylabel, xlabel="epoch"):
    """``series``: name -> list of (x, y)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, pts in series.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", ms=3, label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_shape_bias(results, path):
    """``results``: name -> ShapeBiasResult."""
    plt = _pyplot()
    names = list(results)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, [results[n].shape_fraction for n in names], color="tab:blue", label="shape")
    ax.bar(names, [results[n].texture_fraction for n in names],
           bottom=[results[n].shape_fraction for n in names], color="tab:orange", label="texture")
    for i, n in enumerate(names):
        for frac in results[n].per_shape_class_fractions.values():
            ax.plot(i, frac, "k.", ms=4)
    ax.axhline(0.5, color="gray", ls="--", lw=1)
    ax.set_ylabel("fraction of decisions")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ood(tables, path):
    """``tables``: name -> ood table; bars show the macro mean with SEM over cells."""
    plt = _pyplot()
    names = sorted(tables, key=lambda n: -tables[n]["macro_mean"])
    means, sems = [], []
    for n in names:
        acc = np.array([r["accuracy"] for r in tables[n]["cells"]])
        means.append(acc.mean())
        sems.append(acc.std(ddof=1) / np.sqrt(len(acc)) if len(acc) > 1 else 0.0)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, means, yerr=sems, capsize=4)
    ax.set_ylabel("mean corruption accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_saliency_grid(images, maps, path, titles=None):
    plt = _pyplot()
    n = len(images)
    fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
    for i in range(n):
        axes[0, i].imshow(np.clip(images[i], 0, 1))
        axes[1, i].imshow(maps[i], cmap="magma", vmin=0, vmax=1)
        if titles:
            axes[0, i].set_title(titles[i], fontsize=7)
        axes[0, i].axis("off")
        axes[1, i].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
