"""Query/key (momentum) image encoders producing unit-norm embeddings."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidInputError

ARCHITECTURES = ("small_conv", "resnet_tiny")
INPUT_MEAN = 0.5
INPUT_STD = 0.25
HEAD_BN_GROUPS = 4


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 256
    width_multiplier: int = 1
    architecture_id: str = "small_conv"
    input_size: int = 32
    input_channels: int = 3

    def __post_init__(self):
        if self.embed_dim < 8:
            raise InvalidInputError("embed_dim must be at least 8")
        if self.width_multiplier < 1:
            raise InvalidInputError("width_multiplier must be a positive integer")
        if self.architecture_id not in ARCHITECTURES:
            raise InvalidInputError(f"unknown architecture {self.architecture_id!r}")
        if self.input_channels != 3:
            raise InvalidInputError("encoders take 3-channel input")

    def hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _norm(channels):
    return nn.GroupNorm(min(8, channels // 2), channels)


def _conv_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), _norm(cout), nn.ReLU(inplace=True))


class GhostBatchNorm1d(nn.BatchNorm1d):
    """BatchNorm whose training statistics come from ``groups`` contiguous chunks.

    Together with a shuffled key batch this keeps a query and its positive
    key out of the same statistics group.
    """

    def __init__(self, num_features, groups=HEAD_BN_GROUPS):
        super().__init__(num_features)
        self.groups = groups

    def forward(self, x):
        if not self.training:
            return super().forward(x)
        g = max(1, min(self.groups, len(x) // 2))
        return torch.cat([super(GhostBatchNorm1d, self).forward(c) for c in x.chunk(g)])


class _Residual(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.n1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.n2 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), _norm(cout))

    def forward(self, x):
        out = F.relu(self.n1(self.conv1(x)))
        out = self.n2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class Encoder(nn.Module):
    """Convolutional backbone followed by a one-hidden-layer projection head."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w = 16 * config.width_multiplier
        if config.architecture_id == "small_conv":
            self.backbone = nn.Sequential(
                _conv_block(3, w), nn.MaxPool2d(2),
                _conv_block(w, 2 * w), nn.MaxPool2d(2),
                _conv_block(2 * w, 4 * w), nn.MaxPool2d(2),
                _conv_block(4 * w, 4 * w),
                nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            )
        else:
            self.backbone = nn.Sequential(
                _conv_block(3, w),
                _Residual(w, w, 1), _Residual(w, 2 * w, 2),
                _Residual(2 * w, 4 * w, 2), _Residual(4 * w, 4 * w, 2),
                nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            )
        feat = 4 * w
        self.head = nn.Sequential(
            nn.Linear(feat, 2 * feat, bias=False), GhostBatchNorm1d(2 * feat), nn.ReLU(inplace=True),
            nn.Linear(2 * feat, config.embed_dim),
        )

    def forward(self, x):
        return F.normalize(self.head(self.backbone(x)), dim=1)


def to_input(images, size):
    """(B, H, W, C) array in [0, 1] -> normalised (B, 3, size, size) float tensor.

    Only resizing and normalisation are applied.  Single-channel inputs
    (shading, silhouettes) are replicated to three channels.
    """
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4:
        raise InvalidInputError(f"expected a (B, H, W, C) batch, got shape {tuple(x.shape)}")
    if x.shape[-1] == 1:
        x = x.expand(-1, -1, -1, 3)
    x = x.permute(0, 3, 1, 2).contiguous()
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return (x - INPUT_MEAN) / INPUT_STD


class EncoderState:
    """A query encoder, its momentum twin and the EMA coefficient.

    Parameter updates need exclusive access; forward passes on a frozen
    state may run concurrently.
    """

    def __init__(self, config: EncoderConfig, momentum_m=0.99, seed=0):
        if not 0.0 <= momentum_m <= 1.0:
            raise InvalidInputError("momentum_m must lie in [0, 1]")
        self.config = config
        self.momentum_m = float(momentum_m)
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.query = Encoder(config)
        torch.random.set_rng_state(gen_state)
        self.key = Encoder(config)
        self.key.load_state_dict(self.query.state_dict())
        for p in self.key.parameters():
            p.requires_grad_(False)

    def forward(self, x, branch="query", shuffle=None):
        """Training-mode forward on an already-normalised input tensor.

        ``shuffle`` is an optional permutation applied to the batch before
        the pass and undone afterwards, so head statistics groups differ
        from the query branch's.
        """
        if branch not in ("query", "key"):
            raise InvalidInputError(f"unknown branch {branch!r}")
        if shuffle is not None:
            shuffle = torch.as_tensor(shuffle)
            x = x[shuffle]
        if branch == "query":
            out = self.query(x)
        else:
            with torch.no_grad():
                out = self.key(x)
        if shuffle is not None:
            out = out[torch.argsort(shuffle)]
        return out

    def params(self, branch):
        net = self.query if branch == "query" else self.key
        return {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}

    def load_params(self, branch, arrays):
        net = self.query if branch == "query" else self.key
        net.load_state_dict({k: torch.from_numpy(np.asarray(v).copy()) for k, v in arrays.items()})


def encode(state, batch, branch="query", batch_size=256):
    """Embed a batch of images in inference mode; returns an (N, D) float64 array of unit rows."""
    if branch not in ("query", "key"):
        raise InvalidInputError(f"unknown branch {branch!r}")
    net = state.query if branch == "query" else state.key
    images = np.asarray(batch)
    if images.ndim < 3:
        raise InvalidInputError("encode expects a stack of images")
    out = []
    was_training = net.training
    net.eval()
    try:
        for start in range(0, len(images), batch_size):
            x = to_input(images[start:start + batch_size], state.config.input_size)
            with torch.no_grad():
                out.append(net(x).double().numpy())
    finally:
        net.train(was_training)
    if not out:
        return np.zeros((0, state.config.embed_dim))
    return np.concatenate(out)


@torch.no_grad()
def momentum_update(state):
    """key <- m * key + (1 - m) * query, in place, for every parameter.

    Floating-point buffers (normalisation running statistics) follow the
    same rule; integer counters are copied.
    """
    m = state.momentum_m
    pairs = [(dict(state.query.named_parameters()), state.key.named_parameters()),
             (dict(state.query.named_buffers()), state.key.named_buffers())]
    for q_named, k_named in pairs:
        for name, k in k_named:
            q = q_named[name]
            if q.shape != k.shape:
                raise InvalidInputError(f"shape mismatch for {name}: {tuple(q.shape)} vs {tuple(k.shape)}")
            if k.is_floating_point():
                k.copy_(m * k + (1.0 - m) * q)
            else:
                k.copy_(q)
    return state
