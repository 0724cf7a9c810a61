"""Training driver: epoch loop, metrics log, checkpointing, abort-on-NaN."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import Tape, Tensor
from .checkpoint import save_checkpoint
from .config import RunConfig
from .geometry import Box2D, Box3D, CameraCalib, wrap_angle
from .imaging import read_image
from .kitti_io import Annotation, ObjectLabel, parse_kitti_calib, parse_kitti_label
from .losses import ImageGroundTruth, compute_loss, ground_truth_from_annotation
from .model import Detector, build_model
from .optim import AdamW, MilestoneSchedule
from .synthetic import generate_dataset

METRICS_HEADER = "step\tl_2d\tl_3d\tl_enc\tl_dmap\toverall\tlr\n"


class NumericFailure(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint is on disk."""


class DataError(ValueError):
    pass


@dataclass
class Sample:
    stem: str
    image: np.ndarray  # float [3, H, W]
    annotation: Annotation
    calib: CameraCalib


@dataclass
class TrainOutcome:
    checkpoint_path: Path
    metrics_path: Path
    dataset_dir: Path
    steps: int
    first_overall: float
    final_overall: float


def load_samples(data_dir) -> list[Sample]:
    root = Path(data_dir)
    image_dir, label_dir, calib_dir = root / "image_2", root / "label_2", root / "calib"
    if not image_dir.is_dir():
        raise DataError(f"{image_dir} does not exist")
    samples = []
    for img_path in sorted(image_dir.iterdir()):
        if img_path.suffix.lower() not in (".ppm", ".png", ".jpg", ".jpeg"):
            continue
        stem = img_path.stem
        label_path = label_dir / f"{stem}.txt"
        calib_path = calib_dir / f"{stem}.txt"
        if not label_path.exists() or not calib_path.exists():
            raise DataError(f"missing label or calib for image {stem!r}")
        samples.append(
            Sample(
                stem=stem,
                image=read_image(img_path),
                annotation=parse_kitti_label(label_path.read_text()),
                calib=parse_kitti_calib(calib_path.read_text()),
            )
        )
    if not samples:
        raise DataError(f"no images found under {image_dir}")
    return samples


def flip_sample(sample: Sample) -> Sample:
    """Horizontal mirror of image and labels (principal point assumed centered)."""
    w_img, _ = sample.calib.image_size
    image = sample.image[:, :, ::-1].copy()
    objects = []
    for obj in sample.annotation.objects:
        x, y, z = obj.box3d.location
        yaw = wrap_angle(math.pi - obj.box3d.yaw)
        box3d = Box3D(
            location=(-x, y, z), dimensions=obj.box3d.dimensions, yaw=yaw,
            category=obj.category, score=obj.box3d.score,
        )
        box2d = Box2D(
            x_min=w_img - obj.box2d.x_max,
            y_min=obj.box2d.y_min,
            x_max=w_img - obj.box2d.x_min,
            y_max=obj.box2d.y_max,
        )
        alpha = wrap_angle(yaw - math.atan2(-x, z))
        objects.append(
            ObjectLabel(
                category=obj.category, truncation=obj.truncation, occlusion=obj.occlusion,
                alpha=alpha, box2d=box2d, box3d=box3d, score=obj.score,
            )
        )
    return Sample(stem=sample.stem, image=image, annotation=Annotation(objects), calib=sample.calib)


def prepare_dataset(cfg: RunConfig, out_dir: Path) -> Path:
    """Resolve the training data directory, materializing synthetic scenes."""
    if cfg["data.source"] == "kitti-dir":
        if not cfg["data.dir"]:
            raise DataError("data.source is kitti-dir but data.dir is not set")
        return Path(cfg["data.dir"])
    dataset_dir = out_dir / "dataset"
    if not (dataset_dir / "image_2").is_dir():
        generate_dataset(cfg, dataset_dir)
    return dataset_dir


def write_provenance(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    (out_dir / "VERSION").write_text(__version__ + "\n")


def train(cfg: RunConfig, out_dir) -> TrainOutcome:
    out = Path(out_dir)
    write_provenance(cfg, out)
    dataset_dir = prepare_dataset(cfg, out)
    samples = load_samples(dataset_dir)

    model = build_model(cfg)
    edges = model.depth_map_head.bin_edges
    categories = list(cfg["model.classes"])
    base_gts = [
        ground_truth_from_annotation(s.annotation, s.calib, categories, edges) for s in samples
    ]
    flipped = [flip_sample(s) for s in samples] if cfg["train.flip"] else None
    flipped_gts = (
        [ground_truth_from_annotation(s.annotation, s.calib, categories, edges) for s in flipped]
        if flipped
        else None
    )

    optimizer = AdamW(
        model.parameters(),
        lr=cfg["train.lr"],
        betas=cfg["train.betas"],
        weight_decay=cfg["train.weight_decay"],
    )
    schedule = MilestoneSchedule(cfg["train.lr"], cfg["train.milestones"])
    loop_rng = np.random.default_rng([cfg["seed"], 0x5EED])

    ckpt_path = out / "checkpoint.mdnx"
    save_checkpoint(ckpt_path, model.state_dict())  # last-good from step zero
    metrics_path = out / "metrics.log"

    batch = cfg["train.batch_size"]
    step = 0
    first_overall = math.nan
    final_overall = math.nan
    with open(metrics_path, "w") as log:
        log.write(METRICS_HEADER)
        for epoch in range(cfg["train.epochs"]):
            lr = schedule.lr_at(epoch)
            optimizer.lr = lr
            order = loop_rng.permutation(len(samples))
            use_flip = (
                loop_rng.random(len(samples)) < 0.5 if cfg["train.flip"] else np.zeros(len(samples), bool)
            )
            for start in range(0, len(order), batch):
                chunk = order[start : start + batch]
                images, gts = [], []
                for idx in chunk:
                    if use_flip[idx]:
                        images.append(flipped[idx].image)
                        gts.append(flipped_gts[idx])
                    else:
                        images.append(samples[idx].image)
                        gts.append(base_gts[idx])
                x = Tensor(np.stack(images))
                model.zero_grad()
                with Tape() as tape:
                    result = model(x)
                    breakdown = compute_loss(result, gts, cfg)
                    if not math.isfinite(breakdown.overall):
                        raise NumericFailure(
                            f"non-finite loss at step {step}; last good checkpoint: {ckpt_path}"
                        )
                    tape.backward(breakdown.total)
                tape.clear()
                optimizer.step()
                if step == 0:
                    first_overall = breakdown.overall
                final_overall = breakdown.overall
                log.write(
                    f"{step}\t{breakdown.l_2d:.10e}\t{breakdown.l_3d:.10e}\t{breakdown.l_enc:.10e}"
                    f"\t{breakdown.l_dmap:.10e}\t{breakdown.overall:.10e}\t{lr:.10e}\n"
                )
                step += 1
            save_checkpoint(ckpt_path, model.state_dict())
            every = cfg["train.checkpoint_every"]
            if every and (epoch + 1) % every == 0:
                save_checkpoint(out / f"checkpoint_epoch{epoch + 1:04d}.mdnx", model.state_dict())
    return TrainOutcome(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        dataset_dir=dataset_dir,
        steps=step,
        first_overall=first_overall,
        final_overall=final_overall,
    )
