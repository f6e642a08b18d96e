"""Desk-scale image data: procedural glyphs, PGM directories, class splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import GLYPH, SPLIT, stream


class LabeledDataset:
    """Images (n x C x H x W, values in [0, 1]) with integer class ids."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, class_names: Sequence[str] | None = None):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be n x C x H x W, got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        images.setflags(write=False)
        labels.setflags(write=False)
        self.images = images
        self.labels = labels
        self.class_names = list(class_names) if class_names is not None else None
        self._by_class = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def by_class(self) -> dict[int, np.ndarray]:
        """Sample indices of every class, ascending."""
        if self._by_class is None:
            order = np.argsort(self.labels, kind="stable")
            cls, starts = np.unique(self.labels[order], return_index=True)
            bounds = list(starts[1:]) + [len(order)]
            self._by_class = {int(c): order[s:e] for c, s, e in zip(cls, starts, bounds)}
        return self._by_class

    def subset_classes(self, class_ids) -> "LabeledDataset":
        keep = np.isin(self.labels, np.asarray(list(class_ids), dtype=np.int64))
        return LabeledDataset(self.images[keep], self.labels[keep], self.class_names)


class UnlabeledDataset:
    """Samples with no visible labels.

    Hidden labels may be kept for diagnostics; episode construction only
    touches :attr:`samples`.
    """

    def __init__(self, samples: np.ndarray, hidden_labels: np.ndarray | None = None):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 4:
            raise ValueError(f"samples must be n x C x H x W, got {samples.shape}")
        samples.setflags(write=False)
        self.samples = samples
        if hidden_labels is not None:
            hidden_labels = np.asarray(hidden_labels, dtype=np.int64)
            if hidden_labels.shape != (samples.shape[0],):
                raise ValueError("hidden_labels must match the number of samples")
            hidden_labels.setflags(write=False)
        self._hidden = hidden_labels

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.samples.shape[1:]

    def reveal_hidden_labels(self) -> np.ndarray | None:
        """Diagnostics only."""
        return self._hidden


def strip_labels(ds: LabeledDataset) -> UnlabeledDataset:
    return UnlabeledDataset(ds.images, ds.labels)


# ---------------------------------------------------------------------------
# procedural glyphs


@dataclass(frozen=True)
class GlyphSpec:
    classes: int = 100
    instances: int = 20
    image_size: int = 14
    stroke_count: tuple[int, int] = (2, 4)
    max_shift: float = 2.0
    max_rotation: float = 10.0
    thickness: tuple[float, float] = (0.7, 1.3)
    wobble: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2 or self.instances < 2:
            raise ValueError("need at least 2 classes and 2 instances per class")
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        lo, hi = self.stroke_count
        if not 1 <= lo <= hi:
            raise ValueError(f"bad stroke_count range {self.stroke_count}")


def _skeleton(rng: np.random.Generator, spec: GlyphSpec) -> list[np.ndarray]:
    lo, hi = spec.stroke_count
    strokes = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        n_pts = int(rng.integers(2, 4))
        strokes.append(rng.uniform(0.2, 0.8, size=(n_pts, 2)))
    return strokes


def _segment_distance(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a
    denom = float(d @ d)
    t = np.clip(((px - a) @ d) / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(px))
    proj = a + t[:, None] * d
    return np.sqrt(((px - proj) ** 2).sum(axis=1))


def render_strokes(strokes: Sequence[np.ndarray], size: int, thickness: float) -> np.ndarray:
    """Anti-aliased rendering of polylines given in pixel coordinates."""
    ys, xs = np.mgrid[0:size, 0:size]
    px = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1).astype(np.float64)
    dist = np.full(size * size, np.inf)
    for pts in strokes:
        for a, b in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(px, a, b))
    img = np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0)
    return img.reshape(size, size)


def _instance(rng: np.random.Generator, strokes, spec: GlyphSpec) -> np.ndarray:
    size = spec.image_size
    angle = math.radians(rng.uniform(-spec.max_rotation, spec.max_rotation))
    shift = rng.uniform(-spec.max_shift, spec.max_shift, size=2)
    thick = rng.uniform(*spec.thickness)
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    placed = []
    for pts in strokes:
        p = pts + rng.normal(0.0, spec.wobble, size=pts.shape)
        p = (p - 0.5) @ rot.T + 0.5
        placed.append(p * size + shift)
    return render_strokes(placed, size, thick)


def gen_glyphs(spec: GlyphSpec) -> LabeledDataset:
    """Render ``instances`` jittered copies of ``classes`` random stroke skeletons.

    Each class draws from its own stream, so the output does not depend on
    the order classes are generated in.
    """
    size = spec.image_size
    images = np.empty((spec.classes * spec.instances, 1, size, size))
    labels = np.repeat(np.arange(spec.classes), spec.instances)
    for c in range(spec.classes):
        rng = stream(spec.seed, c, GLYPH)
        strokes = _skeleton(rng, spec)
        for k in range(spec.instances):
            images[c * spec.instances + k, 0] = _instance(rng, strokes, spec)
    return LabeledDataset(images, labels)


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D array (or 1 x H x W) of values in [0, 1] as 8-bit P5."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError("PGM holds a single channel")
        img = img[0]
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + q.tobytes())


def _header_tokens(data: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 file into an H x W float array in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = _header_tokens(data)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pixels = data[pos : pos + w * h]
    if len(pixels) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def load_image_dir(path, layout: str = "per_class_subdirs"):
    """Load a directory of PGM files.

    ``per_class_subdirs`` returns a :class:`LabeledDataset` with one class per
    subdirectory (sorted by name).  ``flat`` reads the files directly under
    ``path``; if a ``manifest.json`` with class ids sits alongside, the result
    is labeled, otherwise an :class:`UnlabeledDataset`.
    """
    root = Path(path)
    if not root.is_dir():
        raise ValueError(f"{root}: not a directory")
    files: list[Path] = []
    labels: list[int] = []
    names = None
    if layout == "per_class_subdirs":
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
        for cid, name in enumerate(names):
            for f in sorted((root / name).glob("*.pgm")):
                files.append(f)
                labels.append(cid)
    elif layout == "flat":
        manifest = root / "manifest.json"
        if manifest.exists():
            entries = json.loads(manifest.read_text())["samples"]
            files = [root / e["path"] for e in entries]
            if all("class_id" in e for e in entries):
                labels = [int(e["class_id"]) for e in entries]
        else:
            files = sorted(root.glob("*.pgm"))
    else:
        raise ValueError(f"unknown layout {layout!r}")
    if not files:
        raise ValueError(f"{root}: no samples found")
    images = []
    shape = None
    for f in files:
        try:
            img = read_pgm(f)
        except (OSError, ValueError) as exc:
            msg = str(exc)
            raise ValueError(msg if str(f) in msg else f"cannot read {f}: {msg}") from exc
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise ValueError(f"{f}: size {img.shape} differs from {shape} of {files[0]}")
        images.append(img)
    arr = np.stack(images)[:, None]
    if labels:
        return LabeledDataset(arr, np.array(labels), names)
    return UnlabeledDataset(arr)


def write_image_dir(ds: LabeledDataset, path) -> Path:
    """Write one PGM per sample in per-class subdirectories plus a manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    counters: dict[int, int] = {}
    for img, cid in zip(ds.images, ds.labels):
        cid = int(cid)
        k = counters.get(cid, 0)
        counters[cid] = k + 1
        rel = f"class_{cid:05d}/{k:05d}.pgm"
        (root / rel).parent.mkdir(exist_ok=True)
        write_pgm(root / rel, img)
        entries.append({"class_id": cid, "path": rel})
    manifest = {"image_shape": list(ds.image_shape), "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


# ---------------------------------------------------------------------------
# class-level splits


@dataclass(frozen=True)
class SplitProtocol:
    train_classes: frozenset
    val_classes: frozenset
    test_classes: frozenset

    def __post_init__(self):
        a, b, c = self.train_classes, self.val_classes, self.test_classes
        overlap = (a & b) | (a & c) | (b & c)
        if overlap:
            raise ValueError(f"split class sets overlap on {sorted(overlap)[:10]}")


def ratio_counts(n_classes: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Floor each share, then give the remainder to the training split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    counts = [int(math.floor(n_classes * r + 1e-9)) for r in ratios]
    counts[0] += n_classes - sum(counts)
    return tuple(counts)


def split(ds: LabeledDataset, protocol, seed: int = 0):
    """Split ``ds`` by class into (train, val, test)."""
    classes = ds.classes()
    if not isinstance(protocol, SplitProtocol):
        n_tr, n_va, _ = ratio_counts(len(classes), protocol)
        order = stream(seed, 0, SPLIT).permutation(classes)
        protocol = SplitProtocol(
            frozenset(int(c) for c in order[:n_tr]),
            frozenset(int(c) for c in order[n_tr : n_tr + n_va]),
            frozenset(int(c) for c in order[n_tr + n_va :]),
        )
    known = set(int(c) for c in classes)
    for part in (protocol.train_classes, protocol.val_classes, protocol.test_classes):
        missing = set(part) - known
        if missing:
            raise ValueError(f"split references unknown classes {sorted(missing)[:10]}")
    return tuple(
        ds.subset_classes(sorted(part))
        for part in (protocol.train_classes, protocol.val_classes, protocol.test_classes)
    )
