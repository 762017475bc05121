"""
The synthetic shape x texture world
===================================

Every image is one silhouette filled with one texture. Shape and texture
labels are independent, so a model can be scored on which cue it uses.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from midvcl.intrinsics import decompose_retinex
from midvcl.shapes import SHAPE_FAMILY, TEXTURE_FAMILY, corrupt, make_cue_conflict, make_shape_texture_dataset

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

samples = make_shape_texture_dataset(seed=0, n_shapes=4, n_textures=4, per_cell=25, h=32, w=32)
print(len(samples), "images,", sum(x.split == "val" for x in samples), "held out for validation")

# %%
# One example per (shape, texture) cell.
fig, axes = plt.subplots(4, 4, figsize=(8, 8))
for x in samples:
    ax = axes[x.shape_label, x.texture_label]
    if not ax.images:
        ax.imshow(x.image)
        ax.set_title(f"{SHAPE_FAMILY[x.shape_label]}/{TEXTURE_FAMILY[x.texture_label]}", fontsize=7)
    ax.axis("off")
fig.tight_layout()
fig.savefig(OUT / "dataset_grid.png", dpi=100)

# %%
# Cue-conflict stimuli put the texture paired with one class on the
# silhouette of another.
stimuli = make_cue_conflict(0, samples, 8)
fig, axes = plt.subplots(1, 8, figsize=(16, 2.4))
for ax, s in zip(axes, stimuli):
    ax.imshow(s.image)
    ax.set_title(f"shape {s.shape_label} / texture {s.texture_label}", fontsize=7)
    ax.axis("off")
fig.savefig(OUT / "cue_conflict.png", dpi=100)

# %%
# The views fed to the momentum branch: silhouette, reflectance, shading.
x = samples[0]
pair = decompose_retinex(x.image)
views = [("image", x.image), ("silhouette", x.silhouette.mask), ("reflectance", pair.reflectance),
         ("shading", pair.shading[..., 0] / pair.shading.max())]
views += [(f"{k} s3", corrupt(x.image, k, 3, seed=0)) for k in ("noise", "blur", "contrast", "highpass")]
fig, axes = plt.subplots(1, len(views), figsize=(2.2 * len(views), 2.4))
for ax, (title, im) in zip(axes, views):
    ax.imshow(np.clip(im, 0, 1), cmap="gray")
    ax.set_title(title, fontsize=8)
    ax.axis("off")
fig.savefig(OUT / "views.png", dpi=100)
print("wrote dataset_grid.png, cue_conflict.png, views.png to", OUT)
