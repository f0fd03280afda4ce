"""Scalar belief math: log-odds transforms, evidence fusion, sharpening and
score calibration.

All functions are pure and operate on plain floats.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateFitError

EPS = 1e-6

DEFAULT_ALPHA = 0.5
DEFAULT_GAMMA = 2.0
DEFAULT_GATE_THRESHOLD = 0.1


@dataclass(frozen=True)
class CalibrationParams:
    """Per-concept temperature and bias applied in log-odds space."""

    concept: str
    temperature: float = 1.0
    bias: float = 0.0

    def __post_init__(self):
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ConfigError(f"calibration temperature must be positive, got {self.temperature}")
        if not math.isfinite(self.bias):
            raise ConfigError(f"calibration bias must be finite, got {self.bias}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationParams":
        return cls(str(d["concept"]), float(d["temperature"]), float(d["bias"]))


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = DEFAULT_ALPHA
    gate_threshold: float = DEFAULT_GATE_THRESHOLD
    gamma: float = DEFAULT_GAMMA
    epsilon: float = EPS

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"fusion.alpha must lie in [0, 1], got {self.alpha}")
        if not self.gate_threshold >= 0.0:
            raise ConfigError(f"fusion.gate_threshold must be >= 0, got {self.gate_threshold}")
        if not self.gamma > 1.0:
            raise ConfigError(f"fusion.gamma must be > 1, got {self.gamma}")
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError(f"fusion.epsilon must lie in (0, 0.5), got {self.epsilon}")


def clamp(p: float, eps: float = EPS) -> float:
    return min(max(p, eps), 1.0 - eps)


def logit(p: float, eps: float = EPS) -> float:
    p = clamp(p, eps)
    return math.log(p / (1.0 - p))


def sigmoid(m: float) -> float:
    if not math.isfinite(m):
        raise ValueError(f"invalid score {m!r}: sigmoid needs a finite value")
    if m >= 0:
        return 1.0 / (1.0 + math.exp(-m))
    e = math.exp(m)
    return e / (1.0 + e)


def apply_calibration(m_raw: float, params: CalibrationParams) -> float:
    """Map a raw log-odds score to a calibrated probability."""
    if not params.temperature > 0:
        raise ConfigError("calibration temperature must be positive")
    return sigmoid(m_raw / params.temperature + params.bias)


def fuse_mix(p: float, p_evidence: float, alpha: float) -> float:
    return (1.0 - alpha) * p + alpha * p_evidence


def fuse_gate(p: float, p_evidence: float, alpha: float, gate_threshold: float) -> tuple[float, bool]:
    """Mix in the evidence only when it differs from ``p`` by at least the threshold."""
    if abs(p_evidence - p) >= gate_threshold:
        return fuse_mix(p, p_evidence, alpha), True
    return p, False


def sharpen(p: float, gamma: float, eps: float = EPS) -> float:
    if not gamma > 1.0:
        raise ConfigError(f"sharpening factor must be > 1, got {gamma}")
    return sigmoid(gamma * logit(p, eps))


def temperature_overlay(p: float, temperature: float, eps: float = EPS) -> float:
    if not temperature > 0:
        raise ConfigError(f"overlay temperature must be positive, got {temperature}")
    return sigmoid(logit(p, eps) / temperature)


def fit_calibration(
    pairs: Iterable[tuple[float, int]],
    concept: str,
    lr: float = 0.1,
    n_iter: int = 500,
) -> CalibrationParams:
    """Fit temperature and bias by gradient descent on the mean logistic NLL.

    Scores are centered and scaled internally so that one learning rate
    works for any score range; descent starts from the identity map in
    those standardized coordinates and the result is mapped back to the raw
    scale.
    """
    data = list(pairs)
    if len(data) < 2:
        raise DegenerateFitError("need at least two (score, label) pairs")
    m = np.array([float(s) for s, _ in data])
    g = np.array([float(y) for _, y in data])
    if not np.all(np.isfinite(m)):
        raise ValueError("calibration scores must be finite")
    if g.min() == g.max():
        raise DegenerateFitError(f"single-class calibration data for concept {concept!r}")

    center = float(m.mean())
    scale = float(m.std())
    if scale == 0.0:
        scale = 1.0
    z = (m - center) / scale
    # descend on (1/T, b) expressed in standardized coordinates:
    #   m / T + b = v * z + c  with  v = scale / T,  c = b + center / T
    v, c = 1.0, 0.0
    for _ in range(n_iter):
        r = _sigmoid_array(v * z + c) - g
        v -= lr * float(np.mean(r * z))
        c -= lr * float(np.mean(r))
    # a non-positive slope means the scores anti-correlate with the labels
    v = max(v, 1e-6 * scale)
    inv_t = v / scale
    b = c - center * inv_t
    return CalibrationParams(concept, temperature=1.0 / inv_t, bias=b)


def fit_overlay_temperature(preds: Sequence[float], labels: Sequence[int], eps: float = EPS) -> float:
    """Single temperature minimizing NLL of ``sigmoid(logit(p) / T)``."""
    from scipy.optimize import minimize_scalar

    x = np.array([logit(p, eps) for p in preds])
    g = np.asarray(labels, dtype=float)
    if x.size == 0:
        raise DegenerateFitError("no predictions to fit an overlay temperature on")
    if x.size != g.size:
        raise DegenerateFitError("predictions and labels differ in length")
    if g.min() == g.max():
        raise DegenerateFitError("overlay fit needs both labels present")

    def nll(log_t: float) -> float:
        q = np.clip(_sigmoid_array(x / math.exp(log_t)), 1e-12, 1 - 1e-12)
        return float(-np.mean(g * np.log(q) + (1 - g) * np.log(1 - q)))

    res = minimize_scalar(nll, bounds=(math.log(0.01), math.log(100.0)), method="bounded",
                          options={"xatol": 1e-8})
    return float(math.exp(res.x))


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
