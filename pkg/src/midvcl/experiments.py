"""Desk-scale comparison harness shared by the demos and the acceptance suite.

Runs are cached: a run directory whose final checkpoint was written for the
same configuration is reused instead of retrained.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import TrainConfig
from .intrinsics import decompose_retinex
from .shapes import make_cue_conflict, make_shape_texture_dataset
from .trainer import checkpoint_paths, extract_features, pretrain

DESK_SHAPES = 4
DESK_TEXTURES = 4
DESK_PER_CELL = 25
DESK_SIZE = 32


def desk_dataset(seed):
    return make_shape_texture_dataset(seed, DESK_SHAPES, DESK_TEXTURES, DESK_PER_CELL, DESK_SIZE, DESK_SIZE)


def desk_intrinsics(samples):
    return {x.name: decompose_retinex(x.image) for x in samples}


def run_name(config):
    name = config.method
    if config.switch_method:
        name += f"+{config.switch_method}@{config.switch_epoch}"
    return f"{name}_s{config.seed}"


def run_method(root, config, dataset, intrinsics=None):
    """Train (or reuse) ``config`` under ``root``; returns the run directory."""
    run_dir = Path(root) / run_name(config)
    done = run_dir / "done.json"
    if done.exists() and json.loads(done.read_text()).get("config_hash") == config.hash():
        return run_dir
    pretrain(config, dataset, run_dir, intrinsics=intrinsics)
    done.write_text(json.dumps({"config_hash": config.hash()}))
    return run_dir


def _features(run_dir, samples, cache):
    out = {}
    for path in checkpoint_paths(run_dir):
        key = (str(path), len(samples))
        if key not in cache:
            cache[key] = extract_features(path, samples)
        out[int(path.stem.split("_")[1])] = cache[key]
    return out


def probe_curve(run_dir, samples, label_kind="shape", seed=0, cache=None):
    """Linear-probe top-1 on the val split for every epoch's checkpoint."""
    cache = {} if cache is None else cache
    splits = np.array([x.split for x in samples])
    curve = []
    for epoch, (feats, shape, texture) in sorted(_features(run_dir, samples, cache).items()):
        labels = shape if label_kind == "shape" else texture
        curve.append((epoch, ev.linear_probe(feats, labels, splits, seed=seed).top1))
    return curve


def first_epoch_reaching(curve, target, start=1):
    """Smallest epoch >= ``start`` whose value reaches ``target`` (None if never)."""
    for epoch, value in curve:
        if epoch >= start and value >= target:
            return epoch
    return None


def alignment_at_best_epoch(run_dir, baseline_dir, k=4):
    """Shape/texture AMI of ``run_dir`` at its best shape-AMI epoch, and the baseline's shape AMI there."""
    shape = dict(ev.ami_trajectory(run_dir, "shape", k=k))
    texture = dict(ev.ami_trajectory(run_dir, "texture", k=k))
    base = dict(ev.ami_trajectory(baseline_dir, "shape", k=k))
    best = max(shape, key=lambda e: (shape[e], -e))
    return {"epoch": best, "shape_ami": shape[best], "texture_ami": texture[best],
            "baseline_shape_ami": base[best]}


def final_head_and_features(run_dir, samples, label_kind="shape", seed=0):
    last = checkpoint_paths(run_dir)[-1]
    feats, shape, texture = extract_features(last, samples)
    labels = shape if label_kind == "shape" else texture
    train = np.array([x.split == "train" for x in samples])
    return last, ev.train_linear_head(feats[train], labels[train], seed=seed), feats


def shape_bias_of(run_dir, samples, n_stimuli=400, seed=0):
    last = checkpoint_paths(run_dir)[-1]
    feats, _, _ = extract_features(last, samples)
    head = ev.train_category_probe(feats, samples, seed=seed)
    stimuli = make_cue_conflict(seed, samples, n_stimuli)
    return ev.shape_bias(last, head, stimuli)


def ood_of(run_dir, samples, seed=0):
    last, head, _ = final_head_and_features(run_dir, samples, "shape", seed)
    val = [x for x in samples if x.split == "val"]
    return ev.ood_accuracy(last, head, val, seed=seed)


def desk_configs(seed, epochs=None):
    """The three runs compared at desk scale: InfoNCE, S-PCL and S-PCL then InfoNCE."""
    base = TrainConfig(seed=seed) if epochs is None else TrainConfig(seed=seed, epochs=epochs)
    return {
        "infonce": base.with_overrides({"method": "infonce"}),
        "spcl": base.with_overrides({"method": "spcl"}),
        "hybrid": TrainConfig.from_dict({**base.to_dict(), "method": "spcl", "switch_method": "infonce",
                                         "switch_epoch": None}),
    }
