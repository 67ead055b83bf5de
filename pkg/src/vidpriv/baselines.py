"""Fixed, non-learned anonymization baselines: naive spatial downsampling
and the eight mask-based obfuscations ({box, segmentation} x {blur,
blacken} x {face, body}).

All operations are pure functions of the clip (and masks) and touch no
pixel outside the requested region.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

__all__ = [
    "DOWNSAMPLE_RATES",
    "OBFUSCATION_CODES",
    "ObfuscationSpec",
    "parse_obfuscation_code",
    "downsample",
    "obfuscate",
    "FixedTransform",
    "identity_transform",
    "downsample_transform",
    "obfuscation_transform",
]

DOWNSAMPLE_RATES = (1, 2, 4, 8, 16)

# Appendix-style short codes: X=box, S=segmentation, K=blacken, B=blur,
# F=face, D=body.
OBFUSCATION_CODES = ("XKF", "XKD", "SKF", "SKD", "XBF", "XBD", "SBF", "SBD")
_SHAPE = {"X": "box", "S": "segmentation"}
_MODE = {"K": "blacken", "B": "blur"}
_REGION = {"F": "face", "D": "body"}


@dataclass(frozen=True)
class ObfuscationSpec:
    region: str  # face | body
    shape: str  # box | segmentation
    mode: str  # blur | blacken

    def __post_init__(self):
        if self.region not in ("face", "body"):
            raise ValueError(f"bad region {self.region!r}")
        if self.shape not in ("box", "segmentation"):
            raise ValueError(f"bad shape {self.shape!r}")
        if self.mode not in ("blur", "blacken"):
            raise ValueError(f"bad mode {self.mode!r}")

    @property
    def code(self) -> str:
        s = "X" if self.shape == "box" else "S"
        m = "K" if self.mode == "blacken" else "B"
        r = "F" if self.region == "face" else "D"
        return s + m + r


def parse_obfuscation_code(code: str) -> ObfuscationSpec:
    code = code.upper()
    if len(code) != 3 or code[0] not in _SHAPE or code[1] not in _MODE or code[2] not in _REGION:
        raise ValueError(f"unknown obfuscation code {code!r} (expected one of {OBFUSCATION_CODES})")
    return ObfuscationSpec(region=_REGION[code[2]], shape=_SHAPE[code[0]], mode=_MODE[code[1]])


def downsample(clip: np.ndarray, r: int) -> np.ndarray:
    """Average-pool each frame by factor r, then nearest-neighbor upsample
    back to the original size (r=1 is the identity)."""
    if r not in DOWNSAMPLE_RATES:
        raise ValueError(f"rate must be one of {DOWNSAMPLE_RATES}, got {r}")
    if r == 1:
        return clip
    w, h = clip.shape[-3], clip.shape[-2]
    wp, hp = w // r, h // r
    if wp < 1 or hp < 1:
        raise ValueError(f"rate {r} exceeds frame size {w}x{h}")
    trimmed = clip[..., : wp * r, : hp * r, :]
    shape = trimmed.shape[:-3] + (wp, r, hp, r, trimmed.shape[-1])
    pooled = trimmed.reshape(shape).mean(axis=(-4, -2))
    ix = np.minimum(np.arange(w) // r, wp - 1)
    iy = np.minimum(np.arange(h) // r, hp - 1)
    return pooled[..., ix[:, None], iy[None, :], :]


def _bounding_box(mask2d: np.ndarray):
    xs, ys = np.nonzero(mask2d)
    if len(xs) == 0:
        return None
    return xs.min(), xs.max(), ys.min(), ys.max()


def obfuscate(clip: np.ndarray, masks: np.ndarray, spec: ObfuscationSpec) -> np.ndarray:
    """Blacken or blur the masked region of every frame.

    masks: binary [T, W, H] for the requested region. Box shape widens the
    region to its per-frame tight bounding box; blur uses a Gaussian with
    sigma = max(3, region_diameter / 8) and only replaces pixels inside the
    region.
    """
    if masks is None:
        raise ValueError(f"missing {spec.region} masks")
    if masks.shape != clip.shape[:3]:
        raise ValueError(f"mask shape {masks.shape} does not match clip {clip.shape[:3]}")
    out = clip.copy()
    for k in range(clip.shape[0]):
        bb = _bounding_box(masks[k])
        if bb is None:
            continue
        x0, x1, y0, y1 = bb
        if spec.shape == "box":
            region = np.zeros_like(masks[k])
            region[x0 : x1 + 1, y0 : y1 + 1] = True
        else:
            region = masks[k].astype(bool)
        if spec.mode == "blacken":
            out[k][region] = 0.0
        else:
            diameter = max(x1 - x0 + 1, y1 - y0 + 1)
            sigma = max(3.0, diameter / 8.0)
            blurred = ndimage.gaussian_filter(clip[k], sigma=(sigma, sigma, 0))
            out[k][region] = blurred[region]
    return out


@dataclass(frozen=True)
class FixedTransform:
    """A named, non-learned clip map usable wherever a trained anonymizer is.

    ``fn`` maps (clips [B, T, W, H, C], per-clip mask dicts or None) to
    transformed clips of the same shape.
    """

    method: str
    variant: str
    fn: Callable = field(repr=False)

    def apply(self, clips: np.ndarray, masks=None) -> np.ndarray:
        out = self.fn(clips, masks)
        if out.shape != clips.shape:
            raise ValueError("fixed transforms must preserve the clip shape")
        return out


def identity_transform() -> FixedTransform:
    return FixedTransform("identity", "", lambda x, m: x)


def downsample_transform(r: int) -> FixedTransform:
    if r not in DOWNSAMPLE_RATES:
        raise ValueError(f"rate must be one of {DOWNSAMPLE_RATES}, got {r}")
    return FixedTransform("downsample", f"r={r}", lambda x, m: downsample(x, r))


def obfuscation_transform(code: str) -> FixedTransform:
    spec = parse_obfuscation_code(code)

    def fn(x, masks):
        if masks is None:
            raise ValueError(f"obfuscation {spec.code} requires region masks")
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            region = masks[i].get(spec.region)
            out[i] = obfuscate(x[i], region, spec)
        return out

    return FixedTransform("obfuscation", spec.code, fn)
