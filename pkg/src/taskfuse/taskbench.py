"""Deterministic synthetic image-classification tasks.

Eight procedural generators stand in for eight real datasets: every task is
a C-way classification problem over small grayscale images whose class is
encoded by a geometric attribute (orientation, position, scale, density).
Each task is individually learnable to high accuracy by the tiny ViT in a
few hundred iterations, generation is bit-reproducible per seed, and splits
are class-balanced and disjoint.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .seeding import derive_rng
from .tinyvit import ModelConfig

GENERATOR_KINDS = ("stripes", "blobs", "checker", "ring", "gradient", "corner",
                   "diag", "noise-texture")

DATASET_FORMAT_VERSION = 1

_PIXEL_NOISE = 0.15


class Split(NamedTuple):
    images: np.ndarray  # (n, S, S, 1) float64
    labels: np.ndarray  # (n,) int64


class TaskData(NamedTuple):
    train: Split
    test: Split
    fewshot: Split


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    generator_kind: str
    num_classes: int = 4
    samples_train: int = 512
    samples_test: int = 256
    samples_fewshot_per_class: int = 10
    label_noise: float = 0.0
    pixel_noise: float = _PIXEL_NOISE
    seed: int = 0
    # shared ambiguous pattern, labeled through a per-task cyclic shift:
    # tasks genuinely compete on this fraction of samples, which caps any
    # single merged model and makes fine-tuning edits push against each other
    conflict_rate: float = 0.0
    conflict_shift: int = 0
    # similarity-knob blending: fraction of samples drawn from another
    # generator's stream (0 = fully distinct, 1 = identical to that task)
    blend_kind: str | None = None
    blend_weight: float = 0.0
    blend_seed: int = 0

    def __post_init__(self):
        if self.generator_kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator_kind {self.generator_kind!r}")
        if self.blend_kind is not None and self.blend_kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown blend_kind {self.blend_kind!r}")
        for name in ("samples_train", "samples_test", "samples_fewshot_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")
        if self.pixel_noise < 0.0:
            raise ValueError("pixel_noise must be nonnegative")
        if not 0.0 <= self.conflict_rate < 0.5:
            raise ValueError("conflict_rate must lie in [0, 0.5)")
        if not 0.0 <= self.blend_weight <= 1.0:
            raise ValueError("blend_weight must lie in [0, 1]")
        if self.blend_weight > 0.0 and self.conflict_rate > 0.0:
            raise ValueError("similarity blending and conflict injection are exclusive")


# ---------------------------------------------------------------------------
# Generators: one image per (kind, class, rng)
# ---------------------------------------------------------------------------

def _grid(s):
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    return x, y


def _gen_image(kind: str, cls: int, num_classes: int, s: int, rng,
               pixel_noise: float = _PIXEL_NOISE) -> np.ndarray:
    x, y = _grid(s)
    cx = cy = (s - 1) / 2.0
    if kind == "stripes":
        theta = np.pi * cls / num_classes
        phase = rng.uniform(0, 2 * np.pi)
        img = np.sin(2 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / (s / 2.0) + phase)
    elif kind == "blobs":
        ang = 2 * np.pi * cls / num_classes + rng.uniform(-0.25, 0.25)
        r = s / 4.0
        bx, by = cx + r * np.cos(ang), cy + r * np.sin(ang)
        img = 2.0 * np.exp(-(((x - bx) ** 2 + (y - by) ** 2) / (2 * (s / 8.0) ** 2))) - 1.0
    elif kind == "checker":
        period = 2 ** (cls % 4 + 1)
        ox, oy = rng.integers(0, period, size=2)
        img = np.where((((x + ox) // (period / 2)).astype(int)
                        + ((y + oy) // (period / 2)).astype(int)) % 2 == 0, 1.0, -1.0)
    elif kind == "ring":
        rad = (cls + 1) / (num_classes + 1) * (s / 2.0)
        jx, jy = rng.uniform(-1, 1, size=2)
        rr = np.sqrt((x - cx - jx) ** 2 + (y - cy - jy) ** 2)
        img = 2.0 * np.exp(-((rr - rad) ** 2) / (2 * (s / 12.0) ** 2)) - 1.0
    elif kind == "gradient":
        theta = 2 * np.pi * cls / num_classes
        proj = ((x - cx) * np.cos(theta) + (y - cy) * np.sin(theta)) / (s / 2.0)
        img = np.clip(proj + rng.uniform(-0.1, 0.1), -1.0, 1.0)
    elif kind == "corner":
        half = s // 2
        img = -np.ones((s, s))
        corner = cls % 4
        sy = 0 if corner in (0, 1) else s - half
        sx = 0 if corner in (0, 2) else s - half
        img[sy:sy + half, sx:sx + half] = 1.0
    elif kind == "diag":
        offsets = np.linspace(-s / 2.5, s / 2.5, num_classes)
        width = s / 6.0
        img = np.where(np.abs((x - y) - offsets[cls]) < width, 1.0, -1.0)
    elif kind == "noise-texture":
        density = (cls + 1) / (num_classes + 1)
        img = np.where(rng.random((s, s)) < density, 1.0, -1.0)
    else:  # pragma: no cover - guarded by TaskSpec validation
        raise ValueError(kind)
    img = img + pixel_noise * rng.standard_normal((s, s))
    return img[..., None]


def _conflict_image(cls: int, num_classes: int, s: int, rng,
                    pixel_noise: float = _PIXEL_NOISE) -> np.ndarray:
    """Shared ambiguous pattern: annuli like the ring generator's but at
    radii offset half a slot from the task rings. The shared base model
    already carries radius features (built for the ring task), so per-task
    fine-tuning resolves these images at the readout level rather than by
    learning a new pattern family."""
    x, y = _grid(s)
    cx = cy = (s - 1) / 2.0
    rad = (cls + 1.5) / (num_classes + 1) * (s / 2.0)
    jx, jy = rng.uniform(-1, 1, size=2)
    rr = np.sqrt((x - cx - jx) ** 2 + (y - cy - jy) ** 2)
    img = 2.0 * np.exp(-((rr - rad) ** 2) / (2 * (s / 12.0) ** 2)) - 1.0
    img = img + pixel_noise * rng.standard_normal((s, s))
    return img[..., None]


def _balanced_labels(n: int, num_classes: int, what: str) -> np.ndarray:
    if n % num_classes != 0:
        raise ValueError(f"{what} count {n} not divisible by {num_classes} classes")
    return np.tile(np.arange(num_classes, dtype=np.int64), n // num_classes)


def _gen_split(spec: TaskSpec, split_name: str, n: int, s: int) -> Split:
    labels = _balanced_labels(n, spec.num_classes, split_name)
    own = derive_rng("taskbench", spec.seed, spec.generator_kind, split_name)
    images = np.empty((n, s, s, 1))
    if spec.blend_weight > 0.0 and spec.blend_kind is not None:
        other = derive_rng("taskbench", spec.blend_seed, spec.blend_kind, split_name)
        mask_rng = derive_rng("taskbench-mask", spec.seed, spec.blend_seed, split_name)
        take_other = mask_rng.random(n) < spec.blend_weight
        for i, cls in enumerate(labels):
            a = _gen_image(spec.generator_kind, int(cls), spec.num_classes, s, own,
                           spec.pixel_noise)
            b = _gen_image(spec.blend_kind, int(cls), spec.num_classes, s, other,
                           spec.pixel_noise)
            images[i] = b if take_other[i] else a
    elif spec.conflict_rate > 0.0:
        # the shared-pattern stream is task-independent so every task sees
        # the same image family; each task labels raw class c as
        # (c + conflict_shift) % num_classes
        shared = derive_rng("taskbench-conflict", split_name)
        mask_rng = derive_rng("taskbench-conflict-mask", spec.seed, split_name)
        is_conflict = mask_rng.random(n) < spec.conflict_rate
        for i, cls in enumerate(labels):
            if is_conflict[i]:
                raw = (int(cls) - spec.conflict_shift) % spec.num_classes
                images[i] = _conflict_image(raw, spec.num_classes, s, shared,
                                            spec.pixel_noise)
            else:
                images[i] = _gen_image(spec.generator_kind, int(cls),
                                       spec.num_classes, s, own, spec.pixel_noise)
    else:
        for i, cls in enumerate(labels):
            images[i] = _gen_image(spec.generator_kind, int(cls), spec.num_classes,
                                   s, own, spec.pixel_noise)
    return Split(images=images, labels=labels)


def generate_task(spec: TaskSpec, cfg: ModelConfig) -> TaskData:
    """Materialize class-balanced train/test/fewshot splits for one task."""
    s = cfg.image_size
    train = _gen_split(spec, "train", spec.samples_train, s)
    test = _gen_split(spec, "test", spec.samples_test, s)
    fewshot = _gen_split(spec, "fewshot",
                         spec.samples_fewshot_per_class * spec.num_classes, s)
    if spec.label_noise > 0.0:
        rng = derive_rng("taskbench-labelnoise", spec.seed)
        flip = rng.random(train.labels.size) < spec.label_noise
        shift = rng.integers(1, spec.num_classes, size=train.labels.size)
        noisy = np.where(flip, (train.labels + shift) % spec.num_classes, train.labels)
        train = Split(images=train.images, labels=noisy.astype(np.int64))
    return TaskData(train=train, test=test, fewshot=fewshot)


def task_similarity_knob(spec_a: TaskSpec, spec_b: TaskSpec,
                         overlap: float) -> tuple[TaskSpec, TaskSpec]:
    """Adjust spec_b so a fraction `overlap` of its samples come from
    spec_a's generator stream. overlap=0 leaves both untouched; overlap=1
    makes task_b's data identical to task_a's."""
    if not 0.0 <= overlap <= 1.0:
        raise ValueError(f"overlap must lie in [0, 1], got {overlap}")
    if overlap > 0.0:
        for field in ("num_classes", "samples_train", "samples_test",
                      "samples_fewshot_per_class", "pixel_noise"):
            if getattr(spec_a, field) != getattr(spec_b, field):
                raise ValueError(f"blending requires matching {field}")
    adjusted = replace(spec_b, blend_kind=spec_a.generator_kind,
                       blend_weight=overlap, blend_seed=spec_a.seed)
    return spec_a, adjusted


def concat_splits(splits) -> Split:
    """Pool several splits into one (used for mixture pretraining and
    few-shot realignment pools)."""
    splits = list(splits)
    if not splits:
        raise ValueError("nothing to pool")
    return Split(images=np.concatenate([s.images for s in splits]),
                 labels=np.concatenate([s.labels for s in splits]))


# ---------------------------------------------------------------------------
# Dataset cache: manifest.json + one little-endian binary blob per array
# ---------------------------------------------------------------------------

def save_task_data(directory, spec: TaskSpec, data: TaskData) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "task_id": spec.task_id,
        "generator_kind": spec.generator_kind,
        "num_classes": spec.num_classes,
        "splits": {},
    }
    for name in ("train", "test", "fewshot"):
        split: Split = getattr(data, name)
        manifest["splits"][name] = {
            "count": int(split.images.shape[0]),
            "image_shape": list(split.images.shape[1:]),
        }
        split.images.astype("<f8").tofile(os.path.join(directory, f"{name}_images.bin"))
        split.labels.astype("<i8").tofile(os.path.join(directory, f"{name}_labels.bin"))
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_task_data(directory) -> TaskData:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version "
                         f"{manifest.get('format_version')!r}")
    splits = {}
    for name, info in manifest["splits"].items():
        shape = (info["count"], *info["image_shape"])
        images = np.fromfile(os.path.join(directory, f"{name}_images.bin"),
                             dtype="<f8").reshape(shape).astype(np.float64)
        labels = np.fromfile(os.path.join(directory, f"{name}_labels.bin"),
                             dtype="<i8").astype(np.int64)
        splits[name] = Split(images=images, labels=labels)
    return TaskData(**splits)


def default_task_specs(num_tasks: int = 8, num_classes: int = 4,
                       samples_train: int = 512, samples_test: int = 256,
                       samples_fewshot_per_class: int = 10,
                       conflict_rate: float = 0.0,
                       pixel_noise: float = _PIXEL_NOISE,
                       base_seed: int = 0) -> list[TaskSpec]:
    """One task per generator kind, seeded deterministically. With conflict
    injection enabled, task i labels the shared pattern through cyclic shift
    i % num_classes."""
    if not 1 <= num_tasks <= len(GENERATOR_KINDS):
        raise ValueError(f"num_tasks must lie in [1, {len(GENERATOR_KINDS)}]")
    return [
        TaskSpec(task_id=kind, generator_kind=kind, num_classes=num_classes,
                 samples_train=samples_train, samples_test=samples_test,
                 samples_fewshot_per_class=samples_fewshot_per_class,
                 conflict_rate=conflict_rate,
                 conflict_shift=i % num_classes,
                 pixel_noise=pixel_noise,
                 seed=base_seed + i)
        for i, kind in enumerate(GENERATOR_KINDS[:num_tasks])
    ]
