import json

import numpy as np
import pytest
import torch

from midvcl import checkpoint as ckpt
from midvcl import trainer
from midvcl.config import TrainConfig
from midvcl.encoder import EncoderConfig, to_input
from midvcl.errors import CheckpointError, DatasetError, InvalidInputError, TrainingError
from midvcl.intrinsics import decompose_retinex
from midvcl.losses import LossConfig
from midvcl.prototypes import ClusteringSpec
from midvcl.trainer import (
    carried_state_hash,
    checkpoint_paths,
    extract_features,
    load_state,
    pretrain,
    read_jsonl,
)


def tiny(**kw):
    base = dict(epochs=2, batch_size=16, learning_rate=0.1, seed=0,
                loss=LossConfig(queue_size=64),
                clustering=ClusteringSpec(k_list=(2, 4), concentration_mean=0.1),
                encoder=EncoderConfig(embed_dim=16))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def intrinsics(small_dataset):
    return {x.name: decompose_retinex(x.image) for x in small_dataset}


def test_zero_epochs_writes_initial_checkpoint_only(tmp_path, small_dataset):
    last = pretrain(tiny(epochs=0), small_dataset, tmp_path)
    assert [p.name for p in checkpoint_paths(tmp_path)] == ["epoch_000.ckpt"]
    assert last.name == "epoch_000.ckpt"
    assert read_jsonl(tmp_path / "metrics.jsonl") == []


def test_hybrid_switch(tmp_path, small_dataset):
    cfg = tiny(method="spcl", epochs=4, switch_epoch=2, switch_method="infonce")
    pretrain(cfg, small_dataset, tmp_path)
    metrics = read_jsonl(tmp_path / "metrics.jsonl")
    for rec in metrics:
        if rec["epoch"] <= 2:
            assert rec["loss_proto"] > 0
        else:
            assert "loss_proto" not in rec
    epochs = read_jsonl(tmp_path / "epochs.jsonl")
    assert [e["method"] for e in epochs] == ["spcl", "spcl", "infonce", "infonce"]
    # state at the end of epoch 2 is exactly the state epoch 3 started from
    end2 = carried_state_hash(tmp_path / "checkpoints" / "epoch_002.ckpt")
    assert end2 == epochs[2]["start_state_hash"]
    for e in range(1, 4):
        assert carried_state_hash(tmp_path / "checkpoints" / f"epoch_{e:03d}.ckpt") == epochs[e]["start_state_hash"]


def test_deterministic_runs_match(tmp_path, small_dataset):
    cfg = tiny(method="spcl", seed=7)
    a = pretrain(cfg, small_dataset, tmp_path / "a")
    b = pretrain(cfg, small_dataset, tmp_path / "b")
    assert ckpt.file_hash(a) == ckpt.file_hash(b)
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()


def test_checkpoint_round_trip(tmp_path, small_dataset):
    last = pretrain(tiny(), small_dataset, tmp_path)
    header, arrays = ckpt.load(last)
    ckpt.save(tmp_path / "again.ckpt", header, arrays)
    assert (tmp_path / "again.ckpt").read_bytes() == last.read_bytes()
    with pytest.raises(CheckpointError):
        ckpt.loads(b"NOTACKPT" + last.read_bytes()[8:])
    with pytest.raises(CheckpointError):
        ckpt.load(tmp_path / "missing.ckpt")


def test_checkpoint_header(tmp_path, small_dataset):
    cfg = tiny()
    last = pretrain(cfg, small_dataset, tmp_path)
    header, arrays = ckpt.load(last)
    assert header["format_version"] == ckpt.FORMAT_VERSION
    assert header["config_hash"] == cfg.hash() and header["epoch"] == 2
    assert header["momentum_m"] == cfg.momentum_m
    assert "rng.torch" in arrays and "queue.buffer" in arrays
    assert any(k.startswith("opt.") for k in arrays)


def test_extract_features(tmp_path, small_dataset):
    last = pretrain(tiny(epochs=1), small_dataset, tmp_path)
    feats, shape, texture = extract_features(last, small_dataset)
    assert feats.shape == (len(small_dataset), 16)
    assert np.allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(shape, [x.shape_label for x in small_dataset])
    again, _, _ = extract_features(last, small_dataset)
    assert np.array_equal(feats, again)
    with pytest.raises(CheckpointError):
        extract_features(last, small_dataset, encoder_config=EncoderConfig(embed_dim=32))


def test_query_and_key_features_match_after_copy_update(tmp_path, small_dataset):
    from midvcl.encoder import momentum_update

    last = pretrain(tiny(epochs=1), small_dataset, tmp_path)
    state, header, _ = load_state(last)
    state.momentum_m = 0.0
    momentum_update(state)
    cfg = tiny(epochs=1)
    trainer.save_checkpoint(tmp_path / "copied.ckpt", cfg, 1, state)
    q, _, _ = extract_features(tmp_path / "copied.ckpt", small_dataset, "query")
    k, _, _ = extract_features(tmp_path / "copied.ckpt", small_dataset, "key")
    assert np.array_equal(q, k)


def test_requirements_are_checked(tmp_path, small_dataset):
    with pytest.raises(DatasetError, match="decompose"):
        pretrain(tiny(method="reflcl"), small_dataset, tmp_path / "r")
    from dataclasses import replace

    no_masks = [replace(x, silhouette=None) for x in small_dataset]
    with pytest.raises(DatasetError, match="mask"):
        pretrain(tiny(method="spcl"), no_masks, tmp_path / "s")
    with pytest.raises(DatasetError):
        pretrain(tiny(batch_size=128, loss=LossConfig(queue_size=128)), small_dataset, tmp_path / "b")


def test_key_inputs_bypass_augmentation(tmp_path, small_dataset, intrinsics):
    seen = []

    def hook(kind, tensor, ids):
        seen.append((kind, tensor.clone(), np.asarray(ids)))

    train = [x for x in small_dataset if x.split == "train"]
    pretrain(tiny(method="midvcl", epochs=1), small_dataset, tmp_path, intrinsics=intrinsics, input_hook=hook)
    kinds = {k for k, _, _ in seen}
    assert kinds == {"cluster_input", "reflectance", "shading"}
    by_name = {x.name: i for i, x in enumerate(small_dataset)}
    for kind, tensor, ids in seen:
        if kind == "cluster_input":
            expected = to_input(np.stack([x.silhouette.mask for x in train]).astype(np.float32)[..., None], 32)
        else:
            key = "reflectance" if kind == "reflectance" else "shading"
            arrs = [getattr(intrinsics[small_dataset[i].name], key) for i in ids]
            expected = to_input(np.stack(arrs).astype(np.float32), 32)
        assert torch.equal(tensor, expected)
    assert by_name


def test_nan_loss_aborts_with_dump(tmp_path, small_dataset, monkeypatch):
    real = trainer.spcl_loss

    def broken(batch, bank, config):
        total, grad, terms = real(batch, bank, config)
        return float("nan"), grad, terms

    monkeypatch.setattr(trainer, "spcl_loss", broken)
    with pytest.raises(TrainingError):
        pretrain(tiny(), small_dataset, tmp_path)
    dump = json.loads((tmp_path / "nan_dump.json").read_text())
    assert dump["epoch"] == 1 and len(dump["sample_ids"]) == 16


@pytest.mark.slow
@pytest.mark.parametrize("method", ["infonce", "pcl", "spcl", "reflcl", "shadcl", "midvcl"])
def test_loss_goes_down(desk_root, method):
    # desk-scale defaults; the first epoch sees a random-init queue, so the trend needs the full schedule
    from midvcl.experiments import desk_dataset, desk_intrinsics, run_method

    ds = desk_dataset(0)
    intrinsics = desk_intrinsics(ds) if method in ("reflcl", "shadcl", "midvcl") else None
    run = run_method(desk_root, TrainConfig(method=method, seed=0), ds, intrinsics)
    epochs = read_jsonl(run / "epochs.jsonl")
    assert len(epochs) == 60
    assert epochs[-1]["loss_total"] < epochs[0]["loss_total"]


def test_snapshots_hold_image_clusterings(tmp_path, small_dataset):
    pretrain(tiny(method="spcl"), small_dataset, tmp_path)
    snaps = sorted((tmp_path / "banks").glob("*.npz"))
    assert len(snaps) == 3
    with np.load(snaps[1]) as snap:
        assert list(snap["image_k"]) == [2, 4]
        assert list(snap["silhouette_k"]) == [2, 4]
        assert len(snap["image_assign_1"]) == len(small_dataset)


# -- config ------------------------------------------------------------------

def test_config_json_round_trip(tmp_path):
    cfg = tiny(method="midvcl", switch_method="infonce")
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = TrainConfig.load(path)
    assert back == cfg and back.hash() == cfg.hash()


def test_default_switch_fraction():
    cfg = TrainConfig(method="spcl", epochs=60, switch_method="infonce")
    assert cfg.switch_epoch == 15
    assert cfg.method_at(15) == "spcl" and cfg.method_at(16) == "infonce"
    assert TrainConfig(method="spcl", epochs=2, switch_method="infonce").switch_epoch == 1


def test_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(method="byol")
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=4, switch_epoch=2)
    with pytest.raises(InvalidInputError):
        TrainConfig(epochs=4, switch_epoch=4, switch_method="infonce")
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=512)
    with pytest.raises(InvalidInputError):
        TrainConfig.from_dict({"method": "spcl", "unknown": 1})
    with pytest.raises(InvalidInputError):
        TrainConfig.from_dict({"schema_version": 99})


def test_overrides():
    cfg = TrainConfig().with_overrides({"loss.temperature_tau": 0.1, "epochs": 5, "encoder.embed_dim": 32})
    assert cfg.loss.temperature_tau == 0.1 and cfg.epochs == 5 and cfg.encoder.embed_dim == 32
    assert cfg.hash() != TrainConfig().hash()
