"""Pretraining loop for every method and hybrid X+Y schedules."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .config import INTRINSIC_METHODS, MASK_METHODS, PROTO_METHODS, AugmentationPolicy, TrainConfig
from .encoder import EncoderState, encode, momentum_update, to_input
from .errors import CheckpointError, DatasetError, TrainingError
from .losses import NegativeQueue, ViewBatch, midvcl_loss, spcl_loss
from .prototypes import build_bank

log = logging.getLogger(__name__)

LOSS_KEYS = ("loss_total", "loss_infonce", "loss_proto", "loss_shad", "loss_refl")


class TrainingData:
    """Array view of a sample list, with optional masks and intrinsic images."""

    def __init__(self, samples, intrinsics=None):
        if not samples:
            raise DatasetError("empty dataset")
        self.names = [x.name for x in samples]
        self.images = np.stack([x.image for x in samples]).astype(np.float32)
        self.shape_labels = np.array([x.shape_label for x in samples])
        self.texture_labels = np.array([x.texture_label for x in samples])
        self.splits = np.array([x.split for x in samples])
        self.masks = None
        if all(x.silhouette is not None for x in samples):
            self.masks = np.stack([x.silhouette.mask for x in samples]).astype(np.float32)[..., None]
        self.reflectance = self.shading = None
        if intrinsics is not None:
            pairs = [intrinsics[n] for n in self.names] if isinstance(intrinsics, dict) else list(intrinsics)
            if len(pairs) != len(samples):
                raise DatasetError("intrinsics do not cover every sample")
            self.reflectance = np.stack([p.reflectance for p in pairs]).astype(np.float32)
            self.shading = np.stack([p.shading for p in pairs]).astype(np.float32)

    def __len__(self):
        return len(self.names)

    def subset(self, idx):
        out = object.__new__(TrainingData)
        for key, value in vars(self).items():
            if isinstance(value, np.ndarray):
                value = value[idx]
            elif isinstance(value, list):
                value = [value[i] for i in idx]
            setattr(out, key, value)
        return out


# -- augmentation ------------------------------------------------------------

def _gaussian_kernels(sigmas, size=5):
    r = torch.arange(size, dtype=torch.float32) - size // 2
    k = torch.exp(-(r[None, :] ** 2) / (2 * torch.as_tensor(sigmas, dtype=torch.float32)[:, None] ** 2))
    return k / k.sum(1, keepdim=True)


def augment(images, rngs, policy: AugmentationPolicy, size):
    """Random resized crop, flip, colour jitter, grayscale and blur.

    ``rngs`` holds one generator per image so that results depend only on
    (seed, epoch, sample id, view), never on batch composition.
    Returns a normalised (B, 3, size, size) tensor.
    """
    b = len(images)
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32).permute(0, 3, 1, 2)
    theta = np.zeros((b, 2, 3), dtype=np.float32)
    jitter = np.ones((b, 3), dtype=np.float32)
    gray = np.zeros(b, dtype=bool)
    blur = np.zeros(b, dtype=np.float32)
    for i, rng in enumerate(rngs):
        area = rng.uniform(*policy.crop_scale)
        ratio = math.exp(rng.uniform(math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1])))
        cw = min(1.0, math.sqrt(area * ratio))
        ch = min(1.0, math.sqrt(area / ratio))
        cx = rng.uniform(-(1 - cw), 1 - cw)
        cy = rng.uniform(-(1 - ch), 1 - ch)
        flip = -1.0 if rng.random() < policy.flip_p else 1.0
        theta[i] = [[cw * flip, 0.0, cx], [0.0, ch, cy]]
        if rng.random() < policy.jitter_p:
            jitter[i] = 1.0 + rng.uniform(-1, 1, size=3) * [policy.brightness, policy.contrast, policy.saturation]
        gray[i] = rng.random() < policy.grayscale_p
        if rng.random() < policy.blur_p:
            blur[i] = rng.uniform(*policy.blur_sigma)

    grid = F.affine_grid(torch.from_numpy(theta), (b, 3, size, size), align_corners=False)
    x = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)

    luma_w = torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)
    j = torch.from_numpy(jitter)
    x = x * j[:, 0].view(-1, 1, 1, 1)
    luma = (x * luma_w).sum(1, keepdim=True)
    mean = luma.mean(dim=(2, 3), keepdim=True)
    x = (x - mean) * j[:, 1].view(-1, 1, 1, 1) + mean
    luma = (x * luma_w).sum(1, keepdim=True)
    x = (x - luma) * j[:, 2].view(-1, 1, 1, 1) + luma
    x = x.clamp(0.0, 1.0)

    g = torch.from_numpy(gray).view(-1, 1, 1, 1)
    x = torch.where(g, (x * luma_w).sum(1, keepdim=True).expand_as(x), x)

    if blur.any():
        sig = np.where(blur > 0, blur, 1.0)
        k = _gaussian_kernels(sig)
        kk = k.repeat_interleave(3, dim=0)  # (3B, 5)
        flat = x.reshape(1, 3 * b, size, size)
        flat = F.conv2d(F.pad(flat, (2, 2, 0, 0), mode="reflect"), kk.view(3 * b, 1, 1, 5), groups=3 * b)
        flat = F.conv2d(F.pad(flat, (0, 0, 2, 2), mode="reflect"), kk.view(3 * b, 1, 5, 1), groups=3 * b)
        blurred = flat.view(b, 3, size, size)
        x = torch.where(torch.from_numpy(blur > 0).view(-1, 1, 1, 1), blurred, x)

    return (x - 0.5) / 0.25


def sample_rngs(seed, epoch, ids, view):
    return [np.random.default_rng([seed, epoch, int(i), view]) for i in ids]


# -- state <-> arrays --------------------------------------------------------

def _optimizer_arrays(optimizer, model):
    out = {}
    names = {id(p): n for n, p in model.named_parameters()}
    for group in optimizer.param_groups:
        for p in group["params"]:
            buf = optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                out[f"opt.{names[id(p)]}"] = buf.detach().numpy().copy()
    return out


def _load_optimizer_arrays(optimizer, model, arrays):
    params = dict(model.named_parameters())
    for key, value in arrays.items():
        if key.startswith("opt."):
            p = params[key[4:]]
            optimizer.state[p]["momentum_buffer"] = torch.from_numpy(value.copy())


def state_arrays(state, optimizer, queue):
    arrays = {f"query.{k}": v for k, v in state.params("query").items()}
    arrays.update({f"key.{k}": v for k, v in state.params("key").items()})
    if optimizer is not None:
        arrays.update(_optimizer_arrays(optimizer, state.query))
    if queue is not None:
        arrays["queue.buffer"] = queue.buffer.copy()
    return arrays


CARRIED_PREFIXES = ("query.", "key.", "opt.", "queue.")


def save_checkpoint(path, config, epoch, state, optimizer=None, queue=None, extra=None):
    header = {
        "config_hash": config.hash(),
        "encoder_hash": config.encoder.hash(),
        "encoder": json.loads(json.dumps(vars(config.encoder))),
        "epoch": int(epoch),
        "momentum_m": state.momentum_m,
        "queue_ptr": None if queue is None else int(queue.ptr),
    }
    header.update(extra or {})
    arrays = state_arrays(state, optimizer, queue)
    arrays["rng.torch"] = torch.random.get_rng_state().numpy()
    ckpt.save(path, header, arrays)


def load_state(path, encoder_config=None):
    """Rebuild an EncoderState from a checkpoint file."""
    from .encoder import EncoderConfig

    header, arrays = ckpt.load(path)
    cfg = EncoderConfig(**header["encoder"])
    if encoder_config is not None and encoder_config.hash() != header["encoder_hash"]:
        raise CheckpointError(
            f"checkpoint {path} was written for encoder {header['encoder_hash']}, "
            f"requested {encoder_config.hash()}")
    state = EncoderState(cfg, momentum_m=header["momentum_m"])
    state.load_params("query", {k[6:]: v for k, v in arrays.items() if k.startswith("query.")})
    state.load_params("key", {k[4:]: v for k, v in arrays.items() if k.startswith("key.")})
    return state, header, arrays


# -- training ----------------------------------------------------------------

def _lr_at(config, epoch):
    if config.lr_schedule == "constant" or config.epochs == 0:
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / config.epochs))


def _loss_weights(method, loss_cfg):
    """(use_bank, alpha_shad, beta_refl) for a loss recipe."""
    if method == "reflcl":
        return False, 0.0, 1.0
    if method == "shadcl":
        return False, 1.0, 0.0
    if method == "midvcl":
        return True, loss_cfg.alpha_shad, loss_cfg.beta_refl
    return method in PROTO_METHODS, 0.0, 0.0


def check_requirements(config, data):
    methods = config.methods()
    if methods & set(MASK_METHODS) and data.masks is None:
        raise DatasetError(f"method(s) {sorted(methods & set(MASK_METHODS))} need silhouette masks")
    if methods & set(INTRINSIC_METHODS) and data.reflectance is None:
        raise DatasetError(
            f"method(s) {sorted(methods & set(INTRINSIC_METHODS))} need intrinsic images; "
            "run the `decompose` command first")
    n_train = int((data.splits == "train").sum())
    if config.batch_size > n_train:
        raise DatasetError(f"batch_size {config.batch_size} exceeds the {n_train} training samples")


def _epoch_snapshot(path, state, data, config, silhouette_bank):
    """Cluster the clean query-branch embeddings of every sample."""
    emb = encode(state, data.images, "query")
    ks = tuple(k for k in config.clustering.k_list if k <= len(emb))
    image_bank = build_bank(emb, replace(config.clustering, k_list=ks))
    extra = {"image_k": np.array([c.k for c in image_bank.clusterings])}
    for i, c in enumerate(image_bank.clusterings):
        extra[f"image_assign_{i}"] = c.assignments
    if silhouette_bank is not None:
        extra["silhouette_k"] = np.array([c.k for c in silhouette_bank.clusterings])
    (silhouette_bank or image_bank).save(path, **extra)


def pretrain(config: TrainConfig, dataset, run_dir, intrinsics=None, input_hook=None):
    """Run pretraining and write checkpoints, metrics and bank snapshots to ``run_dir``.

    ``dataset`` is a list of LabeledSample (only the train split is used for
    optimisation; snapshots cluster all samples).  ``intrinsics`` maps sample
    names to IntrinsicPair.  ``input_hook(kind, tensor, ids)`` is called with
    every key-branch input that bypasses augmentation.
    Returns the path of the final checkpoint.
    """
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "banks").mkdir(parents=True, exist_ok=True)
    data = dataset if isinstance(dataset, TrainingData) else TrainingData(dataset, intrinsics)
    check_requirements(config, data)
    train_idx = np.flatnonzero(data.splits == "train")
    train = data.subset(train_idx)

    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)

    (run_dir / "config.json").write_text(config.to_json())
    np.savez(run_dir / "labels.npz", shape=data.shape_labels, texture=data.texture_labels,
             split=data.splits, names=np.array(data.names))

    state = EncoderState(config.encoder, momentum_m=config.momentum_m, seed=config.seed)
    optimizer = torch.optim.SGD(state.query.parameters(), lr=config.learning_rate,
                                momentum=config.sgd_momentum, weight_decay=config.weight_decay)
    queue = NegativeQueue(config.loss.queue_size, config.encoder.embed_dim, seed=config.seed)
    size = config.encoder.input_size

    metrics_path = run_dir / "metrics.jsonl"
    epochs_path = run_dir / "epochs.jsonl"
    metrics_path.write_text("")
    epochs_path.write_text("")

    _epoch_snapshot(run_dir / "banks" / "epoch_000.npz", state, data, config, None)
    last = run_dir / "checkpoints" / "epoch_000.ckpt"
    save_checkpoint(last, config, 0, state, optimizer, queue, {"method": config.method})

    step = 0
    for epoch in range(1, config.epochs + 1):
        method = config.method_at(epoch)
        use_bank, alpha, beta = _loss_weights(method, config.loss)
        lr = _lr_at(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        start_hash = ckpt.arrays_hash(state_arrays(state, optimizer, queue))
        bank = None
        if use_bank and epoch >= config.clustering.warmup_epoch:
            source = train.masks if method in MASK_METHODS else train.images
            if input_hook is not None:
                input_hook("cluster_input", to_input(source, size), np.arange(len(train)))
            bank = build_bank(encode(state, source, "key"), config.clustering)

        order = np.random.default_rng([config.seed, epoch, 7]).permutation(len(train))
        n_steps = len(order) // config.batch_size
        sums = {}
        for b in range(n_steps):
            ids = order[b * config.batch_size:(b + 1) * config.batch_size]
            gid = train_idx[ids]
            v1 = augment(train.images[ids], sample_rngs(config.seed, epoch, gid, 1), config.augmentation, size)
            v2 = augment(train.images[ids], sample_rngs(config.seed, epoch, gid, 2), config.augmentation, size)
            q = state.forward(v1, "query")
            shuffle = np.random.default_rng([config.seed, epoch, b, 11]).permutation(len(ids))
            k = state.forward(v2, "key", shuffle).double().numpy()

            refl_keys = shad_keys = None
            if beta > 0:
                x = to_input(train.reflectance[ids], size)
                if input_hook is not None:
                    input_hook("reflectance", x, gid)
                refl_keys = state.forward(x, "key", shuffle).double().numpy()
            if alpha > 0:
                x = to_input(train.shading[ids], size)
                if input_hook is not None:
                    input_hook("shading", x, gid)
                shad_keys = state.forward(x, "key", shuffle).double().numpy()

            batch = ViewBatch(queries=q.detach().double().numpy(), keys=k, negatives=queue.negatives(),
                              sample_ids=ids, seed=int(np.random.default_rng([config.seed, epoch, b]).integers(2**31)))
            loss_cfg = config.loss
            if method in ("reflcl", "shadcl"):
                loss_cfg = replace(loss_cfg, alpha_shad=alpha, beta_refl=beta)
            if alpha > 0 or beta > 0:
                total, grad, terms = midvcl_loss(batch, bank, refl_keys, shad_keys, loss_cfg)
            else:
                total, grad, terms = spcl_loss(batch, bank, loss_cfg)

            if not np.isfinite(total) or not np.all(np.isfinite(grad)):
                dump = {"epoch": epoch, "step": step, "method": method,
                        "sample_ids": gid.tolist(), "terms": {k_: float(v) for k_, v in terms.items()}}
                (run_dir / "nan_dump.json").write_text(json.dumps(dump, indent=2))
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}; see nan_dump.json")

            optimizer.zero_grad(set_to_none=True)
            q.backward(torch.from_numpy(grad).to(q.dtype))
            optimizer.step()
            momentum_update(state)
            queue.push(k)

            record = {"epoch": epoch, "step": step}
            record.update({key: float(terms[key]) for key in LOSS_KEYS if key in terms})
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
            for key, value in terms.items():
                sums[key] = sums.get(key, 0.0) + float(value)
            step += 1

        summary = {"epoch": epoch, "method": method, "lr": lr, "start_state_hash": start_hash,
                   "bank": bank is not None}
        summary.update({key: value / max(n_steps, 1) for key, value in sums.items()})
        with open(epochs_path, "a") as fh:
            fh.write(json.dumps(summary) + "\n")
        log.info("epoch %d (%s): %s", epoch, method,
                 ", ".join(f"{k_}={v:.4f}" for k_, v in summary.items() if k_.startswith("loss")))

        _epoch_snapshot(run_dir / "banks" / f"epoch_{epoch:03d}.npz", state, data, config, bank)
        last = run_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(last, config, epoch, state, optimizer, queue, {"method": method})

    return last


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def carried_state_hash(checkpoint_path):
    """Hash of the fields that cross an epoch boundary (params, optimizer, queue)."""
    _, arrays = ckpt.load(checkpoint_path)
    return ckpt.arrays_hash({k: v for k, v in arrays.items() if k.startswith(CARRIED_PREFIXES)})


def extract_features(checkpoint_path, samples, branch="query", encoder_config=None):
    """Embed ``samples`` with resize + normalise only.

    Returns ``(features, shape_labels, texture_labels)`` in sample order.
    """
    state, _, _ = load_state(checkpoint_path, encoder_config)
    images = np.stack([x.image for x in samples])
    feats = encode(state, images, branch)
    return feats, np.array([x.shape_label for x in samples]), np.array([x.texture_label for x in samples])


def checkpoint_paths(run_dir):
    return sorted(Path(run_dir, "checkpoints").glob("epoch_*.ckpt"))
