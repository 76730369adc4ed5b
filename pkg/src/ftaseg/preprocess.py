"""Intensity windowing, 3-axis slicing, and the train/validation split.

Slices are tagged ``x`` (fix x, shape D x H), ``y`` (fix y, shape D x W) or
``z`` (fix z, shape H x W) and named ``<source_id>_<index>_<axis>.vol``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError
from .volume import NORMALIZED, RAW, Volume

AXES = ("x", "y", "z")
SPLITS = ("train", "val")

DEFAULT_BOTTOM = 500.0
DEFAULT_TOP = 2000.0
DEFAULT_VAL_FRACTION = 0.10


@dataclass(frozen=True)
class WindowSpec:
    """Intensity window [bottom, top] mapped linearly onto [0, 1]."""

    bottom: float = DEFAULT_BOTTOM
    top: float = DEFAULT_TOP

    def __post_init__(self) -> None:
        if not self.bottom < self.top:
            raise ConfigError(f"window bottom {self.bottom} must be < top {self.top}")


@dataclass(frozen=True)
class Slice2D:
    """One 2D plane of a volume, with its slicing axis and position."""

    data: np.ndarray
    axis_tag: str
    index: int
    source_id: str = "vol"

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise DataError(f"slice data must be 2D and nonempty, got {arr.shape}")
        if self.axis_tag not in AXES:
            raise DataError(f"axis_tag must be one of {AXES}, got {self.axis_tag!r}")
        if self.index < 0:
            raise DataError(f"slice index must be >= 0, got {self.index}")
        if arr.flags.writeable:
            if arr is self.data:  # never mutate a caller-owned array
                arr = arr.copy()
            arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    file: str
    axis: str
    index: int
    source_id: str
    split: str = "train"

    def __post_init__(self) -> None:
        if self.axis not in AXES:
            raise DataError(f"bad axis {self.axis!r} in manifest entry")
        if self.split not in SPLITS:
            raise DataError(f"bad split {self.split!r} in manifest entry")
        if not self.file.endswith(f"_{self.axis}.vol"):
            raise DataError(
                f"file name {self.file!r} does not carry the _{self.axis} suffix"
            )


@dataclass(frozen=True)
class SliceManifest:
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, split: str) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.split == split)

    def source_ids(self) -> tuple[str, ...]:
        return tuple(sorted({e.source_id for e in self.entries}))


def window_normalize(v: Volume, w: WindowSpec = WindowSpec()) -> Volume:
    """Clamp raw intensities to the window and rescale onto [0, 1]."""
    if v.value_unit != RAW:
        raise DataError("window_normalize expects a raw-intensity volume")
    scaled = (v.data - np.float32(w.bottom)) / np.float32(w.top - w.bottom)
    return Volume(np.clip(scaled, 0.0, 1.0), NORMALIZED)


def slice_volume(v: Volume, source_id: str = "vol") -> list[Slice2D]:
    """All D + H + W planes of a volume, ordered by (axis, index), axis x<y<z."""
    d, h, w = v.dims
    out: list[Slice2D] = []
    for i in range(w):
        out.append(Slice2D(v.data[:, :, i], "x", i, source_id))
    for i in range(h):
        out.append(Slice2D(v.data[:, i, :], "y", i, source_id))
    for i in range(d):
        out.append(Slice2D(v.data[i, :, :], "z", i, source_id))
    return out


def slice_filename(source_id: str, index: int, axis: str) -> str:
    return f"{source_id}_{index}_{axis}.vol"


def build_manifest(slices: Iterable[Slice2D], split: str = "train") -> SliceManifest:
    entries = [
        ManifestEntry(
            file=slice_filename(s.source_id, s.index, s.axis_tag),
            axis=s.axis_tag,
            index=s.index,
            source_id=s.source_id,
            split=split,
        )
        for s in slices
    ]
    return SliceManifest(tuple(entries))


def merge_manifests(*manifests: SliceManifest) -> SliceManifest:
    entries: list[ManifestEntry] = []
    for m in manifests:
        entries.extend(m.entries)
    return SliceManifest(tuple(entries))


def split_train_val(
    manifest: SliceManifest,
    val_fraction: float = DEFAULT_VAL_FRACTION,
    seed: int = 0,
    by_volume: bool = False,
) -> SliceManifest:
    """Mark floor(val_fraction * N) entries as validation via a seeded shuffle.

    With ``by_volume`` the unit of selection is the source volume instead of
    the slice (leakage-free split): floor(val_fraction * V) volumes, at least
    one, are held out entirely.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(manifest)
    if n == 0:
        raise DataError("cannot split an empty manifest")
    rng = np.random.default_rng(seed)
    if by_volume:
        ids = list(manifest.source_ids())
        n_val_vols = max(1, int(np.floor(val_fraction * len(ids))))
        val_ids = {ids[i] for i in rng.permutation(len(ids))[:n_val_vols]}
        return SliceManifest(
            tuple(
                replace(e, split="val" if e.source_id in val_ids else "train")
                for e in manifest.entries
            )
        )
    n_val = int(np.floor(val_fraction * n))
    val_idx = set(rng.permutation(n)[:n_val].tolist())
    return SliceManifest(
        tuple(
            replace(e, split="val" if i in val_idx else "train")
            for i, e in enumerate(manifest.entries)
        )
    )


def write_manifest(manifest: SliceManifest, path: Path | str) -> None:
    """UTF-8 CSV with header ``file,axis,index,source_id,split``."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["file", "axis", "index", "source_id", "split"])
        for e in manifest.entries:
            writer.writerow([e.file, e.axis, e.index, e.source_id, e.split])


def read_manifest(path: Path | str) -> SliceManifest:
    entries: list[ManifestEntry] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != ["file", "axis", "index", "source_id", "split"]:
            raise DataError(f"{path}: unexpected manifest header {reader.fieldnames}")
        for row in reader:
            entries.append(
                ManifestEntry(
                    file=row["file"],
                    axis=row["axis"],
                    index=int(row["index"]),
                    source_id=row["source_id"],
                    split=row["split"],
                )
            )
    return SliceManifest(tuple(entries))
