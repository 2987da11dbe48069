"""Named, grouped flat parameter blobs and task-vector arithmetic.

A ParameterSet is an ordered mapping of group name -> flat float64 array,
with one tag per group marking which architectural family it belongs to
(embeddings, attention, mlp, norm, head). Task vectors are ParameterSet
deltas carrying task identity and transport metadata. All arithmetic is
pure: inputs are never mutated and returned arrays are fresh.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

GROUP_TAGS = ("patch_embed", "pos_embed", "class_embed", "attention", "mlp", "norm", "head")

CHECKPOINT_FORMAT_VERSION = 1


class IncompatibleParametersError(ValueError):
    """Raised when two ParameterSets cannot take part in arithmetic."""


class DegenerateVectorError(ValueError):
    """Raised for zero-norm inputs to cosine similarity."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != 1:
        raise ValueError(f"parameter groups must be flat, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ParameterSet:
    """Ordered groups of flat 64-bit parameters plus per-group tags."""

    groups: dict[str, np.ndarray]
    tags: dict[str, str]
    model_config_hash: str

    def __post_init__(self):
        object.__setattr__(self, "groups", {k: _freeze(v) for k, v in self.groups.items()})
        if set(self.tags) != set(self.groups):
            raise ValueError("tags must cover exactly the group names")
        for name, tag in self.tags.items():
            if tag not in GROUP_TAGS:
                raise ValueError(f"unknown group tag {tag!r} on group {name!r}")

    @property
    def total_dim(self) -> int:
        return sum(v.size for v in self.groups.values())

    def group_names(self) -> list[str]:
        return list(self.groups)

    def check_compatible(self, other: "ParameterSet") -> None:
        """Arithmetic compatibility: same names, lengths and config hash."""
        if self.model_config_hash != other.model_config_hash:
            raise IncompatibleParametersError(
                f"model_config_hash mismatch: {self.model_config_hash!r} vs "
                f"{other.model_config_hash!r}"
            )
        for name in self.groups:
            if name not in other.groups:
                raise IncompatibleParametersError(f"group {name!r} missing from other set")
            if self.groups[name].size != other.groups[name].size:
                raise IncompatibleParametersError(
                    f"group {name!r} length mismatch: "
                    f"{self.groups[name].size} vs {other.groups[name].size}"
                )
        for name in other.groups:
            if name not in self.groups:
                raise IncompatibleParametersError(f"unexpected extra group {name!r}")

    def map_groups(self, fn) -> "ParameterSet":
        return ParameterSet(
            groups={k: fn(v) for k, v in self.groups.items()},
            tags=dict(self.tags),
            model_config_hash=self.model_config_hash,
        )


@dataclass(frozen=True)
class TaskVector:
    """A ParameterSet-shaped delta with task identity and transport metadata."""

    delta: ParameterSet
    task_id: str
    source_user: int
    is_perturbed: bool = False
    noise_variance_used: float = 0.0

    def __post_init__(self):
        if self.noise_variance_used < 0:
            raise ValueError("noise_variance_used must be nonnegative")
        if not self.is_perturbed and self.noise_variance_used != 0.0:
            raise ValueError("clean task vectors must record zero noise variance")


def compute_task_vector(fine: ParameterSet, base: ParameterSet, task_id: str = "task",
                        source_user: int = 1) -> TaskVector:
    """Elementwise fine - base, packaged as a clean TaskVector."""
    fine.check_compatible(base)
    delta = ParameterSet(
        groups={k: fine.groups[k] - base.groups[k] for k in fine.groups},
        tags=dict(fine.tags),
        model_config_hash=fine.model_config_hash,
    )
    return TaskVector(delta=delta, task_id=task_id, source_user=source_user)


def add_scaled(base: ParameterSet, vectors: list[TaskVector], lambda_n: float) -> ParameterSet:
    """base + lambda_n * sum of deltas, summed in ascending source_user order.

    The summation order is pinned so fusion is bit-reproducible regardless of
    the order the caller assembled the vector list in.
    """
    if not vectors:
        raise ValueError("add_scaled requires at least one task vector")
    if not 0.0 <= lambda_n <= 1.0:
        raise ValueError(f"lambda_n must lie in [0, 1], got {lambda_n}")
    for v in vectors:
        v.delta.check_compatible(base)
    ordered = sorted(vectors, key=lambda v: (v.source_user, v.task_id))
    out = {}
    for name in base.groups:
        acc = np.zeros_like(base.groups[name])
        for v in ordered:
            acc += v.delta.groups[name]
        out[name] = base.groups[name] + lambda_n * acc
    return ParameterSet(groups=out, tags=dict(base.tags),
                        model_config_hash=base.model_config_hash)


def cosine_similarity(a: TaskVector, b: TaskVector) -> float:
    """Cosine of the flattened deltas, in [-1, 1]."""
    a.delta.check_compatible(b.delta)
    va, vb = flatten(a.delta), flatten(b.delta)
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity undefined for a zero-norm task vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def flatten(p: ParameterSet) -> np.ndarray:
    """Concatenate all groups into one flat array (group order preserved)."""
    if not p.groups:
        return np.zeros(0)
    return np.concatenate([p.groups[k] for k in p.groups])


def unflatten(flat: np.ndarray, like: ParameterSet) -> ParameterSet:
    """Inverse of flatten against a template ParameterSet. Bit-exact round trip."""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != like.total_dim:
        raise ValueError(f"flat size {flat.size} != total_dim {like.total_dim}")
    out, ofs = {}, 0
    for name, arr in like.groups.items():
        out[name] = flat[ofs:ofs + arr.size].copy()
        ofs += arr.size
    return ParameterSet(groups=out, tags=dict(like.tags),
                        model_config_hash=like.model_config_hash)


def group_select(p: ParameterSet, tags) -> ParameterSet:
    """Restrict to the groups whose tag is in `tags`, preserving order."""
    tags = set(tags)
    unknown = tags - set(GROUP_TAGS)
    if unknown:
        raise ValueError(f"unknown group tags: {sorted(unknown)}")
    kept = [name for name in p.groups if p.tags[name] in tags]
    return ParameterSet(
        groups={k: p.groups[k] for k in kept},
        tags={k: p.tags[k] for k in kept},
        model_config_hash=p.model_config_hash,
    )


# ---------------------------------------------------------------------------
# Checkpoint file format
#
# Line 1: compact JSON manifest terminated by "\n":
#   {"format_version": 1, "model_config_hash": "...",
#    "groups": [{"name": ..., "length": ..., "tag": ...}, ...]}
# Then the raw little-endian float64 payload of each group, concatenated in
# manifest order.
# ---------------------------------------------------------------------------

def save_checkpoint(path, p: ParameterSet) -> None:
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config_hash": p.model_config_hash,
        "groups": [
            {"name": name, "length": int(arr.size), "tag": p.tags[name]}
            for name, arr in p.groups.items()
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for arr in p.groups.values():
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"not a parameter checkpoint: bad manifest line ({exc})") from exc
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version "
                             f"{manifest.get('format_version')!r}")
        groups, tags = {}, {}
        for entry in manifest["groups"]:
            n = int(entry["length"])
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"truncated payload for group {entry['name']!r}")
            groups[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            tags[entry["name"]] = entry["tag"]
        if fh.read(1):
            raise ValueError("trailing bytes after last group payload")
    return ParameterSet(groups=groups, tags=tags,
                        model_config_hash=manifest["model_config_hash"])
