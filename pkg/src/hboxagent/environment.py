"""Synthetic diagnostic cases with plantable rectangular signal.

Each case is a noisy grayscale image. Positive cases carry ``n_peaks``
bright ``roi_size x roi_size`` rectangles; the first one is recorded as the
ground-truth ROI. A label-correlated calibrated score stands in for an
external evidence score that arrives already calibrated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .belief import CalibrationParams, apply_calibration
from .errors import BoundsError, ConfigError, DatasetFormatError, GenerationError
from .rng import stream

PLACEMENT_ATTEMPTS = 100
MASK_FILL = 0.0


@dataclass(frozen=True)
class Roi:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise BoundsError(f"ROI must be at least 1x1, got {self.w}x{self.h}")

    def inside(self, width: int, height: int) -> bool:
        return 0 <= self.x and self.x + self.w <= width and 0 <= self.y and self.y + self.h <= height

    def intersects(self, other: "Roi") -> bool:
        return (self.x < other.x + other.w and other.x < self.x + self.w
                and self.y < other.y + other.h and other.y < self.y + self.h)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "Roi":
        return cls(int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"]))


@dataclass(eq=False)
class Case:
    id: str
    concept: str
    image: np.ndarray  # shape (height, width)
    label: int
    gt_roi: Roi | None = None
    prior_score: float | None = None
    domain_tag: str = "source"

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    def with_image(self, image: np.ndarray) -> "Case":
        return Case(self.id, self.concept, image, self.label, self.gt_roi, self.prior_score, self.domain_tag)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Case):
            return NotImplemented
        return (self.id == other.id and self.concept == other.concept and self.label == other.label
                and self.gt_roi == other.gt_roi and self.prior_score == other.prior_score
                and self.domain_tag == other.domain_tag
                and self.image.shape == other.image.shape
                and bool(np.array_equal(self.image, other.image)))


@dataclass(frozen=True)
class GenSpec:
    width: int = 32
    height: int = 32
    noise_sigma: float = 1.0
    signal_amplitude: float = 1.5
    roi_size: int = 4
    positive_rate: float = 0.5
    n_peaks: int = 1
    prior_informativeness: float = 3.0
    seed: int = 0
    concepts: tuple[str, ...] = ("finding",)
    domain_tag: str = "source"

    def __post_init__(self):
        if self.roi_size < 1:
            raise ConfigError("gen.roi_size must be >= 1")
        if self.width < self.roi_size or self.height < self.roi_size:
            raise ConfigError("gen.width and gen.height must be >= gen.roi_size")
        if not 0.0 <= self.positive_rate <= 1.0:
            raise ConfigError("gen.pos_rate must lie in [0, 1]")
        if self.n_peaks < 1:
            raise ConfigError("gen.peaks must be >= 1")
        if self.noise_sigma < 0 or self.prior_informativeness < 0:
            raise ConfigError("gen.noise and gen.prior_info must be >= 0")
        if not self.concepts:
            raise ConfigError("gen.concepts must name at least one concept")


def _separated(a: Roi, b: Roi) -> bool:
    # no window of the same size can touch both rectangles
    s = max(a.w, a.h, b.w, b.h)
    return abs(a.x - b.x) >= 2 * s - 1 or abs(a.y - b.y) >= 2 * s - 1


def _place_peaks(spec: GenSpec, rng: np.random.Generator) -> list[Roi]:
    s = spec.roi_size
    peaks: list[Roi] = []
    for _ in range(spec.n_peaks):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            cand = Roi(int(rng.integers(0, spec.width - s + 1)), int(rng.integers(0, spec.height - s + 1)), s, s)
            if all(_separated(cand, p) for p in peaks):
                peaks.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place {spec.n_peaks} separated {s}x{s} peaks in a "
                f"{spec.width}x{spec.height} image after {PLACEMENT_ATTEMPTS} attempts")
    return peaks


def generate_case(spec: GenSpec, index: int) -> Case:
    """Build case ``index``; a pure function of ``(spec, index)``."""
    key = (spec.seed, spec.domain_tag, index)
    label = int(stream(*key, "label").random() < spec.positive_rate)
    image = stream(*key, "noise").normal(0.0, 1.0, size=(spec.height, spec.width)) * spec.noise_sigma
    gt_roi = None
    if label == 1:
        peaks = _place_peaks(spec, stream(*key, "peaks"))
        for r in peaks:
            image[r.y:r.y + r.h, r.x:r.x + r.w] += spec.signal_amplitude
        gt_roi = peaks[0]
    z = spec.prior_informativeness * (2 * label - 1) + float(stream(*key, "prior").normal())
    prior = apply_calibration(z, CalibrationParams("identity"))
    concept = spec.concepts[index % len(spec.concepts)]
    return Case(f"{spec.domain_tag}-{index:06d}", concept, image, label, gt_roi, prior, spec.domain_tag)


def generate_dataset(spec: GenSpec, n: int, start: int = 0) -> list[Case]:
    return [generate_case(spec, i) for i in range(start, start + n)]


def mask_roi(image: np.ndarray, roi: Roi, fill: float = MASK_FILL) -> np.ndarray:
    h, w = image.shape
    if not roi.inside(w, h):
        raise BoundsError(f"ROI {roi} lies outside a {w}x{h} image")
    out = image.copy()
    out[roi.y:roi.y + roi.h, roi.x:roi.x + roi.w] = fill
    return out


def random_roi(width: int, height: int, w: int, h: int, rng: np.random.Generator) -> Roi:
    if w > width or h > height:
        raise BoundsError(f"{w}x{h} ROI does not fit a {width}x{height} image")
    x = int(rng.integers(0, width - w + 1))
    y = int(rng.integers(0, height - h + 1))
    return Roi(x, y, w, h)


# -- serialization -----------------------------------------------------------

def case_to_dict(case: Case) -> dict:
    return {
        "id": case.id,
        "concept": case.concept,
        "label": case.label,
        "width": case.width,
        "height": case.height,
        "pixels": case.image.ravel().tolist(),
        "gt_roi": case.gt_roi.to_dict() if case.gt_roi is not None else None,
        "prior_score": case.prior_score,
        "domain_tag": case.domain_tag,
    }


def case_from_dict(d: dict) -> Case:
    width, height = int(d["width"]), int(d["height"])
    pixels = np.asarray(d["pixels"], dtype=float)
    if pixels.size != width * height:
        raise ValueError(f"expected {width * height} pixels, found {pixels.size}")
    label = int(d["label"])
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    prior = d.get("prior_score")
    if prior is not None and not 0.0 <= float(prior) <= 1.0:
        raise ValueError(f"prior_score outside [0, 1]: {prior}")
    gt = d.get("gt_roi")
    return Case(
        id=str(d["id"]),
        concept=str(d["concept"]),
        image=pixels.reshape(height, width),
        label=label,
        gt_roi=Roi.from_dict(gt) if gt is not None else None,
        prior_score=float(prior) if prior is not None else None,
        domain_tag=str(d.get("domain_tag", "source")),
    )


def save_dataset(cases: Iterable[Case], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(json.dumps(case_to_dict(case), separators=(",", ":")))
            fh.write("\n")


def load_dataset(path: str | Path) -> list[Case]:
    cases = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                cases.append(case_from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(line_no, str(exc)) from exc
    return cases


def split(cases: Sequence[Case], n_first: int) -> tuple[list[Case], list[Case]]:
    return list(cases[:n_first]), list(cases[n_first:])

