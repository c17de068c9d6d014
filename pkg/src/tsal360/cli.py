"""Operator command line: build datasets, split folds, train, predict, evaluate.

Configuration is flat ``key=value`` text mirroring the config dataclass
field names; command-line flags override file values, which override the
built-in defaults.  Logs go to stderr, data to stdout and files.  The
environment variable TSAL_THREADS caps internal projection parallelism.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import datapipe, geometry, metrics, pngio, tensorfile
from .datapipe import DatasetConfig, FoldSpec
from .encoders import EncoderConfig
from .model import ModelConfig, TextSaliencyModel, TrainingSample

logger = logging.getLogger("tsal360")

TRAIN_DEFAULTS = {"epochs": 4, "batch_size": 8, "lr": 1e-5, "weight_decay": 0.01}


def _field_defaults() -> dict:
    merged = dict(TRAIN_DEFAULTS)
    for cls in (ModelConfig, EncoderConfig, DatasetConfig):
        for f in dataclasses.fields(cls):
            merged.setdefault(f.name, f.default)
    return merged


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("on", "true", "1", "yes"):
            return True
        if low in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"config key {key}: cannot parse boolean from {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(","))
    return raw


def parse_config_file(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def write_config_file(path, values: dict) -> None:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, bool):
            v = "on" if v else "off"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_config(args) -> dict:
    """defaults < config file < CLI flags, with types taken from the defaults."""
    defaults = _field_defaults()
    merged = dict(defaults)
    if getattr(args, "config", None):
        for key, raw in parse_config_file(args.config).items():
            if key not in defaults:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, raw, defaults[key])
    flag_map = {
        "seed": "seed",
        "attention": "attention",
        "head": "head",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "lr": "lr",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            merged[key] = val
    for flag in ("sim_est", "skips"):
        val = getattr(args, flag, None)
        if val is not None:
            merged[flag] = val == "on"
    return merged


def configs_from(merged: dict) -> tuple[ModelConfig, EncoderConfig, DatasetConfig, dict]:
    pick = lambda cls: {f.name: merged[f.name] for f in dataclasses.fields(cls)}
    enc_kwargs = pick(EncoderConfig)
    enc_kwargs["patch_res"] = merged["patch_res"]
    model_cfg = ModelConfig(**pick(ModelConfig))
    enc_cfg = EncoderConfig(**enc_kwargs)
    data_cfg = DatasetConfig(**pick(DatasetConfig))
    train = {k: merged[k] for k in TRAIN_DEFAULTS}
    return model_cfg, enc_cfg, data_cfg, train


def _merged_as_file_dict(merged: dict) -> dict:
    keep = set(_field_defaults())
    return {k: v for k, v in merged.items() if k in keep}


# ---------------------------------------------------------------------------
# subcommands


def cmd_dataset_build(args) -> int:
    merged = resolve_config(args)
    _, _, data_cfg, _ = configs_from(merged)
    manifest = datapipe.build_dataset(args.videos, args.fixations, args.captions, args.out, data_cfg)
    sys.stdout.write(manifest)
    return 0


def cmd_kfold(args) -> int:
    if args.ids:
        ids = [ln.strip() for ln in Path(args.ids).read_text().splitlines() if ln.strip()]
    else:
        ids = sorted(p.name for p in Path(args.store).iterdir() if p.is_dir())
    spec = datapipe.kfold_split(ids, k=args.k, seed=args.seed if args.seed is not None else 0)
    spec.save(args.out)
    logger.info("wrote %d folds over %d videos to %s", len(spec.folds), len(ids), args.out)
    return 0


def _load_training_samples(store: Path, videos: Path, keep_videos: set[str] | None) -> list[TrainingSample]:
    samples = []
    for trip in datapipe.load_triplets(store):
        if keep_videos is not None and trip.video_id not in keep_videos:
            continue
        frames = np.stack([pngio.read_rgb(videos / f) for f in trip.frame_files])
        samples.append(
            TrainingSample(
                text=trip.text,
                gt=trip.gt_map,
                frames=frames,
                key=f"{trip.video_id}/{trip.event_id}/{trip.window_start}",
            )
        )
    return samples


def cmd_train(args) -> int:
    merged = resolve_config(args)
    model_cfg, enc_cfg, _, train_kw = configs_from(merged)
    keep = None
    if args.folds:
        spec = FoldSpec.load(args.folds)
        if args.fold_index is None:
            raise ValueError("--folds requires --fold-index (the held-out fold)")
        keep = {v for i, fold in enumerate(spec.folds) if i != args.fold_index for v in fold}
    samples = _load_training_samples(Path(args.store), Path(args.videos), keep)
    if not samples:
        raise ValueError("no training samples selected")
    logger.info("training on %d samples", len(samples))
    model = TextSaliencyModel(model_cfg, enc_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = model.train(samples, checkpoint_path=out / "checkpoint.tsal", **train_kw)
    write_config_file(out / "config.cfg", _merged_as_file_dict(merged))
    with open(out / "train_log.csv", "w") as f:
        f.write("epoch,step,loss\n")
        for epoch, step, loss in rows:
            f.write(f"{epoch},{step},{loss:.6f}\n")
    logger.info("checkpoint and log written to %s", out)
    return 0


def _frames_for_predict(frames_dir: Path, count: int) -> np.ndarray:
    files = sorted(frames_dir.glob("*.png"))
    if len(files) < count:
        raise ValueError(f"{frames_dir} holds {len(files)} frames, model needs {count}")
    return np.stack([pngio.read_rgb(p) for p in files[-count:]])


def cmd_predict(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    if args.config is None:
        sibling = ckpt.parent / "config.cfg"
        if sibling.exists():
            args.config = str(sibling)
    merged = resolve_config(args)
    model_cfg, enc_cfg, _, _ = configs_from(merged)
    model = TextSaliencyModel.load(ckpt, model_cfg, enc_cfg)
    frames = _frames_for_predict(Path(args.frames), model_cfg.frames)
    sal = model.predict(frames, args.text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pngio.write_gray(out / "saliency.png", sal)
    tensorfile.write_checkpoint(out / "saliency.tsal", {"saliency": sal.astype(np.float32)})
    logger.info("saliency map %sx%s written to %s", sal.shape[0], sal.shape[1], out)
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    names = [n for n in names if (gt_dir / n).exists()]
    if not names:
        raise ValueError(f"no common .png files between {pred_dir} and {gt_dir}")
    spec = FoldSpec.load(args.folds) if args.folds else None
    scores, fold_of = [], []
    for name in names:
        scores.append(
            {
                "cc": metrics.cc(pngio.read_gray(pred_dir / name), pngio.read_gray(gt_dir / name)),
                "sim": metrics.sim(pngio.read_gray(pred_dir / name), pngio.read_gray(gt_dir / name)),
                "kld": metrics.kld(pngio.read_gray(pred_dir / name), pngio.read_gray(gt_dir / name)),
            }
        )
        fold = 0
        if spec is not None:
            video = name.split("__", 1)[0]
            fold = spec.fold_of(video)
        fold_of.append(fold)
    agg = metrics.aggregate(scores, fold_of)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(metrics.report_csv(agg))
    table = metrics.report_table(agg)
    (out / "report.txt").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_project(args) -> int:
    merged = resolve_config(args)
    model_cfg, _, _, _ = configs_from(merged)
    frame = pngio.read_rgb(args.frame)
    layout = geometry.build_layout(model_cfg.viewports, model_cfg.fov, model_cfg.patch_res)
    seq = geometry.ErpFrameSequence(data=frame[None])
    stack = geometry.project_to_tangents(seq, layout)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(layout.count):
        pngio.write_rgb(out / f"tangent_{t:02d}.png", stack.data[0, t])
    plan = geometry.build_blend_plan(layout, layout.patch_res, seq.grid)
    rebuilt = np.stack(
        [geometry.apply_blend_plan(plan, stack.data[0, :, c].astype(np.float64)) for c in range(3)]
    )
    pngio.write_rgb(out / "reassembled.png", rebuilt)
    logger.info("%d tangent images and the reassembled frame written to %s", layout.count, out)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value configuration file")
    p.add_argument("--seed", type=int, help="override every config seed")
    p.add_argument("--attention", choices=["vstca", "vsta"])
    p.add_argument("--head", choices=["sigmoid", "relu"])
    p.add_argument("--sim-est", dest="sim_est", choices=["on", "off"])
    p.add_argument("--skips", choices=["on", "off"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsal360", description="Text-driven 360-degree video saliency engine"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-build", help="construct the triplet dataset from fixations")
    p.add_argument("--videos", required=True)
    p.add_argument("--fixations", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_dataset_build)

    p = sub.add_parser("kfold", help="split videos into cross-validation folds")
    p.add_argument("--ids", help="file of video ids, one per line")
    p.add_argument("--store", help="triplet store to take video ids from")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_kfold)

    p = sub.add_parser("train", help="train a model on a triplet store")
    p.add_argument("--store", required=True)
    p.add_argument("--videos", required=True)
    p.add_argument("--folds")
    p.add_argument("--fold-index", dest="fold_index", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict a saliency map for a frame window")
    p.add_argument("--frames", required=True, help="directory of ERP frame PNGs")
    p.add_argument("--text", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--folds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="dump tangent views of one ERP frame")
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_project)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # operator surface: fail with a message, not a traceback
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
