"""Command-line entry point: ``midvcl <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import intrinsics as intr
from .config import INTRINSIC_METHODS, METHODS, TrainConfig
from .errors import DatasetError, MidVCLError
from .shapes import load_dataset, load_image, make_cue_conflict, make_shape_texture_dataset, read_manifest, write_dataset
from .checkpoint import file_hash
from .trainer import checkpoint_paths, extract_features, load_state, pretrain

log = logging.getLogger("midvcl")

DATA_ROOT_ENV = "MIDVCL_DATA_ROOT"
INTRINSICS_DIR = "intrinsics"


class CommandError(MidVCLError):
    pass


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def code_hash():
    """Content hash of the package sources, stable across checkouts."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def _data_root(args, parser):
    root = args.data or os.environ.get(DATA_ROOT_ENV)
    if not root:
        parser.error(f"--data is required (or set {DATA_ROOT_ENV})")
    root = Path(root)
    if not (root / "manifest.csv").exists():
        raise DatasetError(f"{root} is not a dataset directory (no manifest.csv)")
    return root


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# -- gen-data ----------------------------------------------------------------

def cmd_gen_data(args, parser):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CommandError(f"{out} exists and is not empty; pass --force to overwrite")
    samples = make_shape_texture_dataset(args.seed, args.shapes, args.textures, args.per_cell, args.size, args.size)
    write_dataset(out, samples)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


# -- decompose ---------------------------------------------------------------

def cmd_decompose(args, parser):
    root = _data_root(args, parser)
    cache = root / INTRINSICS_DIR
    rows = read_manifest(root)
    meta_path = cache / "metadata.json"
    if meta_path.exists() and not args.force:
        meta = intr.read_cache_metadata(cache)
        if (meta["grad_threshold"], meta["epsilon_floor"]) != (args.grad_threshold, args.epsilon_floor):
            raise CommandError(
                f"cache at {cache} was built with grad_threshold={meta['grad_threshold']}, "
                f"epsilon_floor={meta['epsilon_floor']}; pass --force to rebuild")
    written = 0
    for row in rows:
        name = row["name"]
        if not args.force and all(p.exists() for p in intr.cache_paths(cache, name)):
            continue
        path = root / "images" / f"{name}.png"
        try:
            img = load_image(path)
        except OSError as exc:
            raise DatasetError(f"cannot read image {path}: {exc}") from exc
        pair = intr.decompose_retinex(img, args.grad_threshold, args.epsilon_floor)
        intr.save_pair(cache, name, pair)
        written += 1
    if written or not meta_path.exists():
        intr.write_cache_metadata(cache, args.grad_threshold, args.epsilon_floor)
    print(f"decomposed {written} images ({len(rows) - written} cached) into {cache}")
    return 0


def load_intrinsics(root, names):
    cache = Path(root) / INTRINSICS_DIR
    if not (cache / "metadata.json").exists():
        return None
    floor = intr.read_cache_metadata(cache)["epsilon_floor"]
    missing = [n for n in names if not all(p.exists() for p in intr.cache_paths(cache, n))]
    if missing:
        raise DatasetError(f"intrinsics cache lacks {len(missing)} images (e.g. {missing[0]}); "
                           "run the `decompose` command")
    return {n: intr.load_pair(cache, n, floor) for n in names}


# -- pretrain ----------------------------------------------------------------

def build_config(args):
    base = TrainConfig.load(args.config).to_dict() if args.config else TrainConfig().to_dict()
    flags = {"method": args.method, "epochs": args.epochs, "seed": args.seed,
             "batch_size": args.batch_size, "learning_rate": args.lr, "deterministic": args.deterministic}
    base.update({k: v for k, v in flags.items() if v is not None})
    if args.switch_method is not None or args.switch_epoch is not None:
        base["switch_method"] = args.switch_method
        base["switch_epoch"] = args.switch_epoch
    cfg = TrainConfig.from_dict(base)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CommandError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    return cfg.with_overrides(overrides) if overrides else cfg


class RunLock:
    """Advisory lock file; concurrent invocations must use distinct run dirs."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CommandError(f"{self.path.parent} is locked by another process ({self.path})") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _artifacts(run_dir):
    return sorted(str(p.relative_to(run_dir)) for p in Path(run_dir).rglob("*")
                  if p.is_file() and p.name not in (".lock", "manifest.json"))


def write_manifest(run_dir, **fields):
    run_dir = Path(run_dir)
    path = run_dir / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update(fields)
    manifest["artifacts"] = _artifacts(run_dir)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def cmd_pretrain(args, parser):
    root = _data_root(args, parser)
    cfg = build_config(args)
    run_id = args.run_id or f"{dt.datetime.now(dt.timezone.utc):%Y%m%dT%H%M%S}-{cfg.method}-s{cfg.seed}"
    run_dir = Path(args.runs_dir) / run_id
    if run_dir.exists() and any(p.name != ".lock" for p in run_dir.iterdir()) and not args.force:
        raise CommandError(f"run directory {run_dir} already exists; pass --force or choose another --run-id")
    run_dir.mkdir(parents=True, exist_ok=True)
    with RunLock(run_dir):
        samples = load_dataset(root, require_masks=False)
        intrinsics = None
        if cfg.methods() & set(INTRINSIC_METHODS):
            intrinsics = load_intrinsics(root, [x.name for x in samples])
        write_manifest(run_dir, run_id=run_id, data_root=str(root.resolve()), code_hash=code_hash(),
                       config=cfg.to_dict(), config_hash=cfg.hash(), started=_now())
        last = pretrain(cfg, samples, run_dir, intrinsics=intrinsics)
        config_bytes = (run_dir / "config.json").read_bytes()
        write_manifest(run_dir, finished=_now(), final_checkpoint=str(last.relative_to(run_dir)),
                       config_sha256=hashlib.sha256(config_bytes).hexdigest())
    print(run_dir)
    return 0


# -- eval --------------------------------------------------------------------

def _run_context(run_dir, checkpoint=None):
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise CommandError(f"{run_dir} has no manifest.json; is it a pretrain run directory?")
    manifest = json.loads(manifest_path.read_text())
    ckpts = checkpoint_paths(run_dir)
    if checkpoint is None:
        if not ckpts:
            raise CommandError(f"no checkpoints under {run_dir}")
        checkpoint = ckpts[-1]
    samples = load_dataset(manifest["data_root"], require_masks=False)
    return run_dir, manifest, Path(checkpoint), samples


def _report_dir(args, run_dir):
    out = Path(args.out) if getattr(args, "out", None) else Path(run_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    return out


def cached_features(checkpoint, samples):
    """Frozen features of ``samples``, cached next to the run's checkpoints."""
    checkpoint = Path(checkpoint)
    cache = checkpoint.parent.parent / "features" / f"{checkpoint.stem}.npz"
    digest = file_hash(checkpoint)
    names = np.array([x.name for x in samples])
    if cache.exists():
        with np.load(cache) as z:
            if str(z["checkpoint_sha256"]) == digest and np.array_equal(z["names"], names):
                return z["features"], z["shape"], z["texture"]
    feats, shape, texture = extract_features(checkpoint, samples)
    cache.parent.mkdir(parents=True, exist_ok=True)
    np.savez(cache, features=feats, shape=shape, texture=texture, names=names, checkpoint_sha256=digest)
    return feats, shape, texture


def _labels(kind, shape, texture):
    if kind == "joint":
        return ev.joint_labels(shape, texture)
    return shape if kind == "shape" else texture


def _shape_head(checkpoint, samples, label_kind="shape", seed=0):
    feats, shape, texture = cached_features(checkpoint, samples)
    labels = _labels(label_kind, shape, texture)
    train = np.array([x.split == "train" for x in samples])
    return ev.train_linear_head(feats[train], labels[train], seed=seed)


def eval_probe(args):
    run_dir, _, ckpt, samples = _run_context(args.run, args.checkpoint)
    splits = [x.split for x in samples]
    out = _report_dir(args, run_dir)
    feats, shape, texture = cached_features(ckpt, samples)
    res = ev.linear_probe(feats, _labels(args.labels, shape, texture), splits, seed=args.seed, label_kind=args.labels)
    report = {"checkpoint": str(ckpt), "label_kind": args.labels, "top1": res.top1, "top5": res.top5,
              "per_class_accuracy": res.per_class_accuracy}
    if args.curve:
        curve = []
        for path in checkpoint_paths(run_dir):
            f, s, t = cached_features(path, samples)
            top1 = ev.linear_probe(f, _labels(args.labels, s, t), splits, seed=args.seed).top1
            curve.append((int(path.stem.split("_")[1]), top1))
        report["curve"] = [{"epoch": e, "top1": a} for e, a in curve]
        ev.plot_curves({args.labels: curve}, out / f"probe_{args.labels}.png", "probe top-1")
    path = ev.write_report(out / f"probe_{args.labels}.json", report)
    print(f"top1={res.top1:.4f} top5={res.top5:.4f} -> {path}")


def eval_ami(args):
    run_dir = Path(args.run)
    traj = ev.ami_trajectory(run_dir, args.labels, k=args.k)
    out = _report_dir(args, run_dir)
    path = ev.write_report(out / f"ami_{args.labels}.json",
                           {"label_kind": args.labels, "k": args.k,
                            "trajectory": [{"epoch": e, "ami": a} for e, a in traj]})
    ev.plot_curves({args.labels: traj}, out / f"ami_{args.labels}.png", "AMI")
    best = max(traj, key=lambda t: t[1])
    print(f"best epoch {best[0]}: AMI={best[1]:.4f} -> {path}")


def compute_shape_bias(ckpt, samples, n_stimuli, seed):
    feats, _, _ = cached_features(ckpt, samples)
    head = ev.train_category_probe(feats, samples, seed=seed)
    stimuli = make_cue_conflict(seed, samples, n_stimuli)
    return ev.shape_bias(ckpt, head, stimuli)


def eval_shape_bias(args):
    run_dir, _, ckpt, samples = _run_context(args.run, args.checkpoint)
    res = compute_shape_bias(ckpt, samples, args.n_stimuli, args.seed)
    out = _report_dir(args, run_dir)
    path = ev.write_report(out / "shape_bias.json", {"checkpoint": str(ckpt), **ev.to_jsonable(res)})
    ev.plot_shape_bias({run_dir.name: res}, out / "shape_bias.png")
    print(f"shape_fraction={res.shape_fraction:.4f} ({res.n_decisive}/{res.n_trials} decisive) -> {path}")
    return res


def compute_ood(ckpt, samples, seed):
    head = _shape_head(ckpt, samples, seed=seed)
    val = [x for x in samples if x.split == "val"]
    return ev.ood_accuracy(ckpt, head, val, seed=seed)


def eval_ood(args):
    run_dir, _, ckpt, samples = _run_context(args.run, args.checkpoint)
    table = compute_ood(ckpt, samples, args.seed)
    out = _report_dir(args, run_dir)
    path = ev.write_report(out / "ood.json", {"checkpoint": str(ckpt), **table})
    ev.plot_ood({run_dir.name: table}, out / "ood.png")
    print(f"macro mean accuracy={table['macro_mean']:.4f} -> {path}")
    return table


def eval_saliency(args):
    run_dir, _, ckpt, samples = _run_context(args.run, args.checkpoint)
    head = _shape_head(ckpt, samples, seed=args.seed)
    state, _, _ = load_state(ckpt)
    model = ev.ProbeModel(state, head)
    val = [x for x in samples if x.split == "val"][: args.n_images]
    maps = np.stack([ev.smoothgrad(model, x.image, args.n_samples, args.noise_sigma, seed=args.seed + i)
                     for i, x in enumerate(val)])
    out = _report_dir(args, run_dir)
    np.savez(out / "saliency.npz", maps=maps, names=np.array([x.name for x in val]))
    ev.plot_saliency_grid([x.image for x in val], maps, out / "saliency.png", titles=[x.name for x in val])
    print(f"saliency maps for {len(val)} images -> {out / 'saliency.png'}")


def eval_compare(args):
    if len(args.runs) != 2:
        raise CommandError("compare takes exactly two runs")
    a, b = (Path(r) for r in args.runs)
    out = _report_dir(args, a)
    if args.metric == "ood":
        tables = {}
        for run in (a, b):
            cached = run / "reports" / "ood.json"
            if cached.exists():
                tables[run.name] = ev.read_report(cached)
            else:
                _, _, ckpt, samples = _run_context(run)
                tables[run.name] = compute_ood(ckpt, samples, args.seed)
        result = ev.paired_comparison(tables[a.name], tables[b.name])
        ev.plot_ood(tables, out / "compare_ood.png")
        summary = f"mean difference={result['mean_difference']:+.4f} t={result['t_statistic']:.3f} p={result['p_value']:.3g}"
    else:
        values = {}
        for run in (a, b):
            _, _, ckpt, samples = _run_context(run)
            res = compute_shape_bias(ckpt, samples, args.n_stimuli, args.seed)
            values[run.name] = res.shape_fraction
        result = {"shape_fraction": values, "difference": values[a.name] - values[b.name]}
        summary = f"shape fraction difference={result['difference']:+.4f}"
    result.update({"metric": args.metric, "runs": [str(a), str(b)]})
    path = ev.write_report(out / f"compare_{args.metric}.json", result)
    print(f"{summary} -> {path}")


EVALS = {"probe": eval_probe, "ami": eval_ami, "shape-bias": eval_shape_bias, "ood": eval_ood,
         "saliency": eval_saliency, "compare": eval_compare}


def cmd_eval(args, parser):
    EVALS[args.eval_command](args)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="midvcl", description="Shape- and intrinsic-view contrastive pretraining.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic shape x texture dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", type=int, default=4)
    p.add_argument("--textures", type=int, default=4)
    p.add_argument("--per-cell", type=int, default=25)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("decompose", help="cache Retinex reflectance/shading for a dataset")
    p.add_argument("--data", help=f"dataset directory (default: ${DATA_ROOT_ENV})")
    p.add_argument("--grad-threshold", type=float, default=intr.DEFAULT_GRAD_THRESHOLD)
    p.add_argument("--epsilon-floor", type=float, default=intr.DEFAULT_EPSILON_FLOOR)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("pretrain", help="run contrastive pretraining")
    p.add_argument("--data", help=f"dataset directory (default: ${DATA_ROOT_ENV})")
    p.add_argument("--config", help="JSON TrainConfig document")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--switch-epoch", type=int)
    p.add_argument("--switch-method", choices=METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. loss.temperature_tau=0.1 (repeatable)")
    p.add_argument("--runs-dir", default="runs")
    p.add_argument("--run-id")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="evaluate a pretraining run")
    p.set_defaults(func=cmd_eval)
    esub = p.add_subparsers(dest="eval_command", required=True)

    def run_args(q, checkpoint=True):
        q.add_argument("--run", required=True)
        if checkpoint:
            q.add_argument("--checkpoint", help="checkpoint file (default: the run's last)")
        q.add_argument("--out", help="report directory (default: <run>/reports)")
        q.add_argument("--seed", type=int, default=0)

    q = esub.add_parser("probe", help="linear probe top-1/top-5")
    run_args(q)
    q.add_argument("--labels", choices=("shape", "texture", "joint"), default="shape")
    q.add_argument("--curve", action="store_true", help="also probe every epoch's checkpoint")
    q = esub.add_parser("ami", help="AMI trajectory over epochs")
    run_args(q, checkpoint=False)
    q.add_argument("--labels", choices=("shape", "texture"), default="shape")
    q.add_argument("--k", type=int, help="clustering to score (default: largest K)")
    q = esub.add_parser("shape-bias", help="cue-conflict shape fraction")
    run_args(q)
    q.add_argument("--n-stimuli", type=int, default=400)
    q = esub.add_parser("ood", help="accuracy under corruptions")
    run_args(q)
    q = esub.add_parser("saliency", help="SmoothGrad maps for validation images")
    run_args(q)
    q.add_argument("--n-images", type=int, default=8)
    q.add_argument("--n-samples", type=int, default=25)
    q.add_argument("--noise-sigma", type=float, default=0.1)
    q = esub.add_parser("compare", help="compare two runs")
    q.add_argument("--runs", nargs="+", required=True)
    q.add_argument("--metric", choices=("ood", "shape-bias"), default="ood")
    q.add_argument("--n-stimuli", type=int, default=400)
    q.add_argument("--out")
    q.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, parser)
    except (MidVCLError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
