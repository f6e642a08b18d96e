"""Class-preserving image augmentations used to synthesize validation samples.

Images are C x H x W float arrays.  Every primitive draws from the generator
it is handed, in a fixed order, so a seeded stream reproduces the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class Primitive:
    def __call__(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = {"op": type(self).__name__}
        d.update({k: v for k, v in self.__dict__.items()})
        return d


@dataclass(frozen=True)
class Identity(Primitive):
    def __call__(self, image, rng):
        return image.copy()


@dataclass(frozen=True)
class ZeroPixels(Primitive):
    """Zero each pixel (all channels) independently with probability ``rate``."""

    rate: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"ZeroPixels rate must lie in [0, 1], got {self.rate}")

    def __call__(self, image, rng):
        keep = rng.random(image.shape[1:]) >= self.rate
        return image * keep[None]


@dataclass(frozen=True)
class Shift(Primitive):
    """Integer translation with zero fill.

    Per axis, the magnitude is uniform on ``[min_px, max_px]`` and the sign is
    a fair coin.
    """

    min_px: int = 0
    max_px: int = 6

    def __post_init__(self):
        if not 0 <= self.min_px <= self.max_px:
            raise ValueError(f"Shift needs 0 <= min_px <= max_px, got ({self.min_px}, {self.max_px})")

    def offsets(self, rng: np.random.Generator) -> tuple[int, int]:
        mags = rng.integers(self.min_px, self.max_px + 1, size=2)
        signs = np.where(rng.random(2) < 0.5, -1, 1)
        return int(mags[0] * signs[0]), int(mags[1] * signs[1])

    def __call__(self, image, rng):
        dy, dx = self.offsets(rng)
        return translate(image, dy, dx)


def translate(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    _, h, w = image.shape
    out = np.zeros_like(image)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[:, dst_y, dst_x] = image[:, src_y, src_x]
    return out


@dataclass(frozen=True)
class HorizontalFlip(Primitive):
    prob: float = 0.5

    def __call__(self, image, rng):
        if rng.random() < self.prob:
            return image[:, :, ::-1].copy()
        return image.copy()


@dataclass(frozen=True)
class Rotate(Primitive):
    """Rotation about the image center by an angle uniform in +-max_degrees."""

    max_degrees: float = 15.0

    def __call__(self, image, rng):
        angle = rng.uniform(-self.max_degrees, self.max_degrees)
        return rotate(image, angle)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear resampling about the center, zero outside the source."""
    from scipy import ndimage  # deferred: costs ~0.3 s of CLI start-up

    _, h, w = image.shape
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # output (y, x) samples input at R^-1 (p - center) + center
    inv = np.array([[c, s], [-s, c]])
    offset = center - inv @ center
    return np.stack(
        [ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="constant", cval=0.0) for ch in image]
    )


@dataclass(frozen=True)
class Grayscale(Primitive):
    """With probability ``prob`` replace every channel by the luminance."""

    prob: float = 0.2

    def __call__(self, image, rng):
        hit = rng.random() < self.prob
        if not hit or image.shape[0] == 1:
            return image.copy()
        if image.shape[0] == 3:
            lum = 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
        else:
            lum = image.mean(axis=0)
        return np.repeat(lum[None], image.shape[0], axis=0)


@dataclass(frozen=True)
class BrightnessContrast(Primitive):
    """Random brightness offset and contrast gain, clipped to [0, 1]."""

    max_delta: float = 0.2

    def __call__(self, image, rng):
        brightness, contrast = rng.uniform(-self.max_delta, self.max_delta, size=2)
        mean = image.mean()
        return np.clip((image - mean) * (1.0 + contrast) + mean + brightness, 0.0, 1.0)


@dataclass(frozen=True)
class PolicyList(Primitive):
    """Pick one sub-composition uniformly per call."""

    policies: tuple = ()

    def __post_init__(self):
        if not self.policies:
            raise ValueError("PolicyList needs at least one policy")

    def __call__(self, image, rng):
        k = int(rng.integers(len(self.policies)))
        return self.policies[k](image, rng)

    def to_dict(self):
        return {"op": "PolicyList", "policies": [p.to_dict() for p in self.policies]}


@dataclass(frozen=True)
class Compose(Primitive):
    """Apply the primitives left to right."""

    steps: tuple = ()

    def __call__(self, image, rng):
        out = image
        for step in self.steps:
            out = step(out, rng)
        if not self.steps:
            out = image.copy()
        return out

    def to_dict(self):
        return {"op": "Compose", "steps": [p.to_dict() for p in self.steps]}


AugmentationSpec = Compose

_PRIMS = {
    cls.__name__: cls
    for cls in (Identity, ZeroPixels, Shift, HorizontalFlip, Rotate, Grayscale, BrightnessContrast)
}


def from_dict(d: dict) -> Primitive:
    """Inverse of ``to_dict`` for every primitive."""
    d = dict(d)
    op = d.pop("op")
    if op == "Compose":
        return Compose(tuple(from_dict(s) for s in d["steps"]))
    if op == "PolicyList":
        return PolicyList(tuple(from_dict(s) for s in d["policies"]))
    if op not in _PRIMS:
        raise ValueError(f"unknown augmentation primitive {op!r}")
    return _PRIMS[op](**d)


def apply_augmentation(aug: Primitive, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = aug(np.asarray(image, dtype=np.float64), rng)
    if out.shape != image.shape:
        raise AssertionError(f"augmentation changed shape {image.shape} -> {out.shape}")
    return out


SHIFT_RANGES = {
    "shift_0": (0, 0),
    "shift_0_3": (0, 3),
    "shift_3_6": (3, 6),
    "shift_0_6": (0, 6),
    "shift_6_9": (6, 9),
    "shift_9_12": (9, 12),
    "shift_0_9": (0, 9),
}


def augmentation_presets(zero_rate: float = 0.4) -> dict[str, Compose]:
    """Named augmentation catalog.

    The ``shift_*`` variants all include pixel zeroing at ``zero_rate`` and
    differ only in the translation range.
    """
    zero = ZeroPixels(zero_rate)
    presets = {
        "identity": Compose((Identity(),)),
        "zero_pixels": Compose((zero,)),
        "zero_shift": Compose((Shift(0, 6), zero)),
        "flip_shift": Compose((Shift(0, 6), HorizontalFlip(0.5))),
        "flip_shift_gray": Compose((Shift(0, 6), HorizontalFlip(0.5), Grayscale(0.2))),
        "full_color": Compose((Shift(0, 6), HorizontalFlip(0.5), Rotate(15.0), BrightnessContrast(0.2))),
        "policy_list": Compose(
            (
                PolicyList(
                    (
                        Compose((Shift(0, 3), Rotate(10.0))),
                        Compose((Rotate(20.0),)),
                        Compose((Shift(2, 5),)),
                        Compose((Shift(0, 2), Rotate(5.0), BrightnessContrast(0.1))),
                        Compose((Rotate(30.0), Shift(0, 1))),
                    )
                ),
            )
        ),
    }
    for name, (lo, hi) in SHIFT_RANGES.items():
        presets[name] = Compose((Shift(lo, hi), zero))
    return presets


def preset(name: str, zero_rate: float = 0.4) -> Compose:
    catalog = augmentation_presets(zero_rate)
    if name not in catalog:
        raise KeyError(f"unknown augmentation preset {name!r}; known: {sorted(catalog)}")
    return catalog[name]
