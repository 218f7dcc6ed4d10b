"""Model populations ("bundles") on disk and in memory, plus uniform weight averaging.

A bundle directory looks like::

    manifest.json        -- population metadata, per-model hyperparams and accuracies
    models/<id>.wts      -- binary weights: magic "SOUP", version u32, L u64, L little-endian f32
    models/<id>.corr     -- packed correctness bits (LSB-first), one block per split in
                            the order declared by the manifest

Weights are stored as 32-bit floats. Averaging accumulates in 64-bit and rounds once,
so the result does not depend on summation order at the population sizes used here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from soupbench.errors import DataError

SPLITS = ("id_val", "ood_test")

_MAGIC = b"SOUP"
_VERSION = 1
_HEADER = struct.Struct("<4sIQ")  # magic, version, length

ACCURACY_ATOL = 1e-9


def pack_bits(bits: np.ndarray) -> bytes:
    """Pack a boolean vector into bytes, LSB-first within each byte."""
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def unpack_bits(raw: bytes, n: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns a bool array of length ``n``."""
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    if bits.size < n:
        raise DataError(f"length mismatch: need {n} correctness bits, file holds {bits.size}")
    return bits[:n].astype(bool)


@dataclass
class CorrectnessRecord:
    """Per-example correctness (1 = correct) on each evaluation split."""

    id_val: np.ndarray
    ood_test: np.ndarray

    def __post_init__(self) -> None:
        self.id_val = np.asarray(self.id_val, dtype=bool)
        self.ood_test = np.asarray(self.ood_test, dtype=bool)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return getattr(self, name)

    def accuracy(self, name: str) -> float:
        bits = self.split(name)
        return float(np.count_nonzero(bits)) / bits.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CorrectnessRecord):
            return NotImplemented
        return np.array_equal(self.id_val, other.id_val) and np.array_equal(
            self.ood_test, other.ood_test
        )


@dataclass
class ModelEntry:
    """One candidate ingredient: weights, correctness on each split, training metadata."""

    id: int
    weights: np.ndarray
    correctness: CorrectnessRecord
    hyperparams: dict
    id_val_accuracy: float

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float32)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelEntry):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.weights, other.weights)
            and self.correctness == other.correctness
            and self.hyperparams == other.hyperparams
            and self.id_val_accuracy == other.id_val_accuracy
        )


@dataclass
class Bundle:
    """A model population plus the manifest needed to regenerate and evaluate it.

    The manifest is free-form JSON metadata; ``split_sizes`` is required. Seed and
    generator fields in the manifest fully determine regeneration of the underlying
    datasets (see :mod:`soupbench.synth`).
    """

    manifest: dict
    models: list[ModelEntry] = field(default_factory=list)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Bundle):
            return NotImplemented
        return self.manifest == other.manifest and self.models == other.models

    @property
    def split_sizes(self) -> dict:
        return self.manifest["split_sizes"]

    def model_by_id(self, model_id: int) -> ModelEntry:
        for m in self.models:
            if m.id == model_id:
                return m
        raise DataError(f"no model with id {model_id} in bundle")

    def validate(self) -> None:
        """Check every type invariant; raise :class:`DataError` on the first violation."""
        sizes = self.manifest.get("split_sizes")
        if sizes is None:
            raise DataError("manifest missing split_sizes")
        ids = [m.id for m in self.models]
        if ids != list(range(1, len(ids) + 1)):
            raise DataError(f"model ids not contiguous from 1: {ids}")
        dim = None
        for m in self.models:
            if m.weights.ndim != 1 or m.weights.size == 0:
                raise DataError(f"model {m.id}: weights must be a non-empty 1-D vector")
            if dim is None:
                dim = m.weights.size
            elif m.weights.size != dim:
                raise DataError(
                    f"length mismatch: model {m.id} has {m.weights.size} weights, expected {dim}"
                )
            if not np.all(np.isfinite(m.weights)):
                raise DataError(f"model {m.id}: non-finite weights")
            for split in SPLITS:
                bits = m.correctness.split(split)
                if bits.size != sizes[split]:
                    raise DataError(
                        f"length mismatch: model {m.id} split {split} has {bits.size} "
                        f"bits, manifest declares {sizes[split]}"
                    )
            if abs(m.correctness.accuracy("id_val") - m.id_val_accuracy) > ACCURACY_ATOL:
                raise DataError(
                    f"accuracy inconsistent with correctness for model {m.id}: "
                    f"{m.id_val_accuracy} vs {m.correctness.accuracy('id_val')}"
                )


def make_manifest(split_sizes: dict, **extra) -> dict:
    """Canonical manifest dict. Built this way, ``load(save(b)) == b`` holds exactly."""
    manifest = {"schema_version": 1, "split_order": list(SPLITS), "split_sizes": dict(split_sizes)}
    manifest.update(extra)
    return manifest


def average_weights(members: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise arithmetic mean of weight vectors.

    Accumulates in float64 and rounds to float32 once, making the result
    permutation-invariant to well below 1e-6 relative error.
    """
    if len(members) == 0:
        raise DataError("empty ingredient set")
    first = np.asarray(members[0])
    acc = np.zeros(first.shape, dtype=np.float64)
    for w in members:
        w = np.asarray(w)
        if w.shape != first.shape:
            raise DataError(f"incompatible shapes: {w.shape} vs {first.shape}")
        acc += w.astype(np.float64)
    return (acc / len(members)).astype(np.float32)


def _weights_path(root: Path, model_id: int) -> Path:
    return root / "models" / f"{model_id}.wts"


def _corr_path(root: Path, model_id: int) -> Path:
    return root / "models" / f"{model_id}.corr"


def write_weights(path: Path, weights: np.ndarray) -> None:
    w = np.asarray(weights, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, w.size))
        fh.write(w.tobytes())


def read_weights(path: Path) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing file: {path}") from None
    if len(raw) < _HEADER.size:
        raise DataError(f"bad magic: {path} is truncated")
    magic, version, length = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DataError(f"bad magic in {path}: {magic!r}")
    if version != _VERSION:
        raise DataError(f"unsupported weight-file version {version} in {path}")
    payload = raw[_HEADER.size :]
    if len(payload) != 4 * length:
        raise DataError(
            f"length mismatch in {path}: header declares {length} floats, "
            f"payload holds {len(payload) // 4}"
        )
    return np.frombuffer(payload, dtype="<f4").astype(np.float32)


def save_bundle(bundle: Bundle, path: str | Path) -> None:
    """Write a bundle directory (manifest + per-model weight and correctness files)."""
    bundle.validate()
    root = Path(path)
    try:
        (root / "models").mkdir(parents=True, exist_ok=True)
        manifest = {"schema_version": 1, "split_order": list(SPLITS)}
        manifest.update(bundle.manifest)
        manifest["models"] = [
            {"id": m.id, "id_val_accuracy": m.id_val_accuracy, "hyperparams": m.hyperparams}
            for m in bundle.models
        ]
        with open(root / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        for m in bundle.models:
            write_weights(_weights_path(root, m.id), m.weights)
            with open(_corr_path(root, m.id), "wb") as fh:
                for split in SPLITS:
                    fh.write(pack_bits(m.correctness.split(split)))
    except OSError as exc:
        raise DataError(f"cannot write bundle at {root}: {exc}") from exc


def load_bundle(path: str | Path) -> Bundle:
    """Read a bundle directory back; validates all invariants before returning."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing file: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    split_order = manifest.get("split_order", list(SPLITS))
    if tuple(split_order) != SPLITS:
        raise DataError(f"unsupported split order {split_order} in {manifest_path}")
    sizes = manifest.get("split_sizes")
    if sizes is None:
        raise DataError(f"manifest missing split_sizes: {manifest_path}")

    models = []
    for record in manifest.get("models", []):
        model_id = record["id"]
        weights = read_weights(_weights_path(root, model_id))
        corr_path = _corr_path(root, model_id)
        if not corr_path.exists():
            raise DataError(f"missing file: {corr_path}")
        raw = corr_path.read_bytes()
        offset = 0
        bits = {}
        for split in SPLITS:
            nbytes = (sizes[split] + 7) // 8
            bits[split] = unpack_bits(raw[offset : offset + nbytes], sizes[split])
            offset += nbytes
        if offset != len(raw):
            raise DataError(f"length mismatch in {corr_path}: {len(raw)} bytes, expected {offset}")
        models.append(
            ModelEntry(
                id=model_id,
                weights=weights,
                correctness=CorrectnessRecord(**bits),
                hyperparams=record["hyperparams"],
                id_val_accuracy=record["id_val_accuracy"],
            )
        )

    meta = {k: v for k, v in manifest.items() if k != "models"}
    bundle = Bundle(manifest=meta, models=models)
    bundle.validate()
    return bundle


def weight_matrix(models: Iterable[ModelEntry]) -> np.ndarray:
    """Stack model weight vectors into an (n, L) float32 matrix."""
    return np.stack([m.weights for m in models])
