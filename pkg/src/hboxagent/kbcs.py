"""Knowledge-based confidence scorer: the evidence tool behind Probe & Ground.

Two backends share one box-filter score map. The primary backend returns
one calibrated image-level probability; the fallback backend also proposes
the peak window as an ROI. Every call carries a provenance record.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .belief import CalibrationParams, apply_calibration, logit, sigmoid
from .environment import Case, Roi
from .errors import BoundsError, ConfigError, ToolError

PRIMARY = "primary"
FALLBACK = "fallback"
BACKENDS = (PRIMARY, FALLBACK)


@dataclass(frozen=True)
class Provenance:
    backend_name: str
    backend_config_hash: str
    calibration: CalibrationParams
    window: int
    call_seed: int

    def to_dict(self) -> dict:
        return {
            "backend_name": self.backend_name,
            "backend_config_hash": self.backend_config_hash,
            "calibration": self.calibration.to_dict(),
            "window": self.window,
            "call_seed": self.call_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(d["backend_name"], d["backend_config_hash"], CalibrationParams.from_dict(d["calibration"]),
                   int(d["window"]), int(d["call_seed"]))


@dataclass(frozen=True)
class EvidenceReport:
    roi: Roi | None
    p_evidence: float
    m_raw: float
    provenance: Provenance

    def to_dict(self) -> dict:
        return {
            "roi": self.roi.to_dict() if self.roi is not None else None,
            "p_evidence": self.p_evidence,
            "m_raw": self.m_raw,
            "provenance": self.provenance.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvidenceReport":
        roi = Roi.from_dict(d["roi"]) if d.get("roi") is not None else None
        return cls(roi, float(d["p_evidence"]), float(d["m_raw"]), Provenance.from_dict(d["provenance"]))


@dataclass(frozen=True)
class KbcsConfig:
    backend: str = FALLBACK
    window: int = 4
    score_scale: float = 1.0
    calibrations: Mapping[str, CalibrationParams] = field(default_factory=dict)
    # concepts the primary backend covers; None means every calibrated concept
    primary_concepts: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ConfigError(f"kbcs.backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.window < 1:
            raise ConfigError("kbcs.window must be >= 1")
        if not self.score_scale > 0:
            raise ConfigError("kbcs.score_scale must be > 0")

    def backend_for(self, concept: str) -> str:
        if self.backend == PRIMARY and (self.primary_concepts is None or concept in self.primary_concepts):
            return PRIMARY
        return FALLBACK

    def config_hash(self, backend: str) -> str:
        payload = {
            "backend": backend,
            "window": self.window,
            "score_scale": self.score_scale,
            "calibrations": {k: v.to_dict() for k, v in sorted(self.calibrations.items())},
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ProxyConfig:
    informativeness: float = 3.0

    def __post_init__(self):
        if not self.informativeness >= 0:
            raise ConfigError("proxy.informativeness must be >= 0")


def box_heatmap(image: np.ndarray, window: int) -> np.ndarray:
    """Mean of every ``window x window`` patch, indexed by its top-left corner."""
    h, w = image.shape
    if window < 1 or window > min(h, w):
        raise BoundsError(f"window {window} does not fit a {w}x{h} image")
    return sliding_window_view(image, (window, window)).mean(axis=(-2, -1))


def select_peak_roi(heatmap: np.ndarray, window: int) -> tuple[Roi, float]:
    # argmax over the raster order gives the smallest (y, x) among ties
    flat = int(np.argmax(heatmap))
    y, x = divmod(flat, heatmap.shape[1])
    return Roi(x, y, window, window), float(heatmap[y, x])


def probe(image: np.ndarray, concept: str, config: KbcsConfig, call_seed: int = 0) -> EvidenceReport:
    calibration = config.calibrations.get(concept)
    if calibration is None:
        raise ToolError(f"no calibration available for concept {concept!r}")
    backend = config.backend_for(concept)
    heat = box_heatmap(image, config.window)
    if backend == PRIMARY:
        roi, peak = None, float(heat.max())
    else:
        roi, peak = select_peak_roi(heat, config.window)
    m_raw = config.score_scale * peak
    prov = Provenance(backend, config.config_hash(backend), calibration, config.window, int(call_seed))
    return EvidenceReport(roi, apply_calibration(m_raw, calibration), m_raw, prov)


def proxy_score(case: Case, config: ProxyConfig, rng: np.random.Generator) -> float:
    """Cheap label-correlated stand-in for the tool, used during training rollouts."""
    return sigmoid(config.informativeness * (2 * case.label - 1) + float(rng.normal()))


def score_report(p_evidence: float, backend_name: str, call_seed: int) -> EvidenceReport:
    """Wrap a ready-made probability (prior or proxy) in a report.

    The score is stored as its log-odds under identity calibration, so the
    usual report consistency check applies to it as well.
    """
    ident = CalibrationParams("identity")
    prov = Provenance(backend_name, hashlib.sha256(backend_name.encode()).hexdigest()[:16], ident, 0, int(call_seed))
    m_raw = logit(p_evidence)
    return EvidenceReport(None, sigmoid(m_raw), m_raw, prov)


def calibration_pairs(cases, config: KbcsConfig) -> dict[str, list[tuple[float, int]]]:
    """Raw backend scores grouped by concept, for fitting per-concept calibration."""
    out: dict[str, list[tuple[float, int]]] = {}
    for case in cases:
        heat = box_heatmap(case.image, config.window)
        out.setdefault(case.concept, []).append((config.score_scale * float(heat.max()), case.label))
    return out
