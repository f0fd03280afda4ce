"""Tabular log-linear action policy over {ProbeGround, Claim, Abstain, Stop}.

The state is reduced to (belief bin, step, probed). Each state indexes one
row of four logits. Invalid actions are excluded from normalization rather
than pushed through ``exp(-inf)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

N_BINS = 10
MASKED = -math.inf


class Action(IntEnum):
    PROBE_GROUND = 0
    CLAIM = 1
    ABSTAIN = 2
    STOP = 3

    @property
    def terminal(self) -> bool:
        return self is not Action.PROBE_GROUND

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def from_label(cls, s: str) -> "Action":
        return _BY_LABEL[s]


_LABELS = {Action.PROBE_GROUND: "ProbeGround", Action.CLAIM: "Claim", Action.ABSTAIN: "Abstain", Action.STOP: "Stop"}
_BY_LABEL = {v: k for k, v in _LABELS.items()}
N_ACTIONS = len(Action)


@dataclass(frozen=True)
class AgentState:
    belief_bin: int
    t: int
    probed: bool
    allow_probe: bool = True

    def valid(self) -> np.ndarray:
        mask = np.ones(N_ACTIONS, dtype=bool)
        mask[Action.CLAIM] = self.probed
        mask[Action.PROBE_GROUND] = self.allow_probe
        return mask


@dataclass
class PolicyParams:
    theta: np.ndarray  # (bins, t_max, 2, N_ACTIONS)

    @property
    def bins(self) -> int:
        return self.theta.shape[0]

    @property
    def t_max(self) -> int:
        return self.theta.shape[1]

    @classmethod
    def zeros(cls, t_max: int = 3, bins: int = N_BINS) -> "PolicyParams":
        if t_max < 1 or bins < 1:
            raise ConfigError("policy needs t_max >= 1 and bins >= 1")
        return cls(np.zeros((bins, t_max, 2, N_ACTIONS)))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy())

    def row(self, state: AgentState) -> tuple[int, int, int]:
        return state.belief_bin, state.t - 1, int(state.probed)

    def to_dict(self) -> dict:
        return {"bins": self.bins, "t_max": self.t_max, "theta": self.theta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        theta = np.asarray(d["theta"], dtype=float)
        if theta.shape != (int(d["bins"]), int(d["t_max"]), 2, N_ACTIONS):
            raise ConfigError(f"policy theta has shape {theta.shape}, inconsistent with bins/t_max")
        if not np.all(np.isfinite(theta)):
            raise ConfigError("policy theta contains non-finite entries")
        return cls(theta)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def featurize(p: float, t: int, probed: bool, params: PolicyParams, allow_probe: bool = True) -> AgentState:
    if t < 1:
        raise ContractError(f"step index must be >= 1, got {t}")
    b = min(int(math.floor(p * params.bins)), params.bins - 1)
    return AgentState(max(b, 0), min(t, params.t_max), probed, allow_probe)


def masked_logits(params: PolicyParams, state: AgentState) -> np.ndarray:
    logits = params.theta[params.row(state)].astype(float)
    logits[~state.valid()] = MASKED
    return logits


def _softmax_valid(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    probs = np.zeros(N_ACTIONS)
    z = logits[valid]
    z = z - z.max()
    e = np.exp(z)
    probs[valid] = e / e.sum()
    return probs


def action_log_probs(params: PolicyParams, state: AgentState) -> np.ndarray:
    """Log-softmax over valid actions; masked entries hold the sentinel."""
    valid = state.valid()
    z = params.theta[params.row(state)][valid]
    zmax = z.max()
    out = np.full(N_ACTIONS, MASKED)
    out[valid] = z - (zmax + math.log(float(np.exp(z - zmax).sum())))
    return out


def action_probs(params: PolicyParams, state: AgentState) -> np.ndarray:
    """Softmax over valid actions; masked entries are exactly 0."""
    return _softmax_valid(params.theta[params.row(state)], state.valid())


def safe_sample(logits: np.ndarray, rng: np.random.Generator) -> Action:
    """Categorical draw over the non-sentinel entries of ``logits``.

    Exactly one uniform is consumed per call, whatever the logits are, so
    paired runs stay aligned step for step.
    """
    u = float(rng.random())
    logits = np.asarray(logits, dtype=float)
    valid = logits != MASKED
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Action.STOP
    if np.all(np.isfinite(logits[valid])):
        probs = _softmax_valid(logits, valid)
    else:
        probs = valid / n_valid
    cdf = np.cumsum(probs)
    if not np.isfinite(cdf[-1]) or cdf[-1] <= 0:
        return Action.STOP
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # guard against landing on a zero-probability slot through rounding
    while idx < N_ACTIONS and not valid[idx]:
        idx += 1
    if idx >= N_ACTIONS:
        idx = int(np.flatnonzero(valid)[-1])
    return Action(idx)


def log_prob(params: PolicyParams, state: AgentState, action: Action) -> float:
    if not state.valid()[action]:
        raise ContractError(f"{Action(action).label} is not valid in {state}")
    return float(action_log_probs(params, state)[action])


def entropy(params: PolicyParams, state: AgentState) -> float:
    valid = state.valid()
    logp = action_log_probs(params, state)[valid]
    return float(max(-(np.exp(logp) * logp).sum(), 0.0))


def kl_divergence(params: PolicyParams, behavior: PolicyParams, state: AgentState) -> float:
    """KL(pi_theta || pi_beta) over the valid actions of ``state``."""
    valid = state.valid()
    logp = action_log_probs(params, state)[valid]
    logq = action_log_probs(behavior, state)[valid]
    return float(max((np.exp(logp) * (logp - logq)).sum(), 0.0))


def grad_log_prob(params: PolicyParams, state: AgentState, action: Action) -> np.ndarray:
    valid = state.valid()
    if not valid[action]:
        raise ContractError(f"{Action(action).label} is not valid in {state}")
    grad = np.zeros_like(params.theta)
    row = -action_probs(params, state)
    row[action] += 1.0
    row[~valid] = 0.0
    grad[params.row(state)] = row
    return grad


def grad_entropy(params: PolicyParams, state: AgentState) -> np.ndarray:
    """dH/dtheta for the state's row: -pi_j (log pi_j + H)."""
    valid = state.valid()
    logp = action_log_probs(params, state)[valid]
    p = np.exp(logp)
    h = -float((p * logp).sum())
    grad = np.zeros_like(params.theta)
    row = np.zeros(N_ACTIONS)
    row[valid] = -p * (logp + h)
    grad[params.row(state)] = row
    return grad


def grad_kl(params: PolicyParams, behavior: PolicyParams, state: AgentState) -> np.ndarray:
    """dKL(pi_theta || pi_beta)/dtheta: pi_j (log pi_j - log beta_j - KL)."""
    valid = state.valid()
    logp = action_log_probs(params, state)[valid]
    logq = action_log_probs(behavior, state)[valid]
    p = np.exp(logp)
    kl = float((p * (logp - logq)).sum())
    grad = np.zeros_like(params.theta)
    row = np.zeros(N_ACTIONS)
    row[valid] = p * (logp - logq - kl)
    grad[params.row(state)] = row
    return grad
