"""Clipped, KL-regularized policy-gradient training of the action policy.

Each training step rolls K episodes per minibatch example under the current
policy (with the cheap proxy standing in for the evidence tool), scores them
with the negative Brier reward, subtracts the per-example mean reward, and
takes one descent step on an importance-weighted policy-gradient loss with
entropy term and KL penalty toward a periodically synced behavior copy.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import policy as pol
from .environment import Case
from .errors import ConfigError, ContractError
from .kbcs import ProxyConfig
from .loop import PROXY, LoopConfig, resolve_p0, run_episode
from .policy import Action, AgentState, PolicyParams
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    K: int = 4
    c_clip: float = 2.0
    eta: float = 0.01
    beta_kl: float = 0.1
    learning_rate: float = 0.1
    batch_size: int = 16
    sync_period: int = 10
    steps: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("train.K must be >= 2")
        if not self.c_clip > 0:
            raise ConfigError("train.c_clip must be > 0")
        if self.eta < 0 or self.beta_kl < 0:
            raise ConfigError("train.eta and train.beta_kl must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.batch_size < 1 or self.sync_period < 1 or self.steps < 0:
            raise ConfigError("train.batch_size and train.sync_period must be >= 1, train.steps >= 0")
        for name in ("c_clip", "eta", "beta_kl", "learning_rate"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"train.{name} must be finite")


@dataclass(frozen=True)
class RolloutRecord:
    advantage: float
    std_advantage: float
    state: AgentState
    action: Action
    logp_theta: float
    logp_beta: float
    entropy: float
    kl: float


def terminal_reward(p_final: float, label: int) -> float:
    return -((p_final - label) ** 2)


def self_critical_advantages(rewards: Sequence[float]) -> list[float]:
    if len(rewards) < 2:
        raise ContractError("self-critical baseline needs at least two rollouts")
    r = np.asarray(rewards, dtype=float)
    return (r - r.mean()).tolist()


def standardize(advantages: Sequence[float]) -> list[float]:
    a = np.asarray(advantages, dtype=float)
    if a.size == 0:
        raise ContractError("cannot standardize an empty batch")
    std = float(a.std())
    if std < STD_FLOOR:
        return [0.0] * a.size
    return ((a - a.mean()) / std).tolist()


def clipped_is_weight(logp_theta: float, logp_beta: float, c_clip: float) -> float:
    return min(math.exp(logp_theta - logp_beta), c_clip)


def make_record(advantage: float, state: AgentState, action: Action,
                policy: PolicyParams, behavior: PolicyParams) -> RolloutRecord:
    return RolloutRecord(
        advantage=advantage,
        std_advantage=0.0,
        state=state,
        action=action,
        logp_theta=pol.log_prob(policy, state, action),
        logp_beta=pol.log_prob(behavior, state, action),
        entropy=pol.entropy(policy, state),
        kl=pol.kl_divergence(policy, behavior, state),
    )


def loss_and_gradient(batch: Sequence[RolloutRecord], policy: PolicyParams, behavior: PolicyParams,
                      config: TrainConfig) -> tuple[float, np.ndarray]:
    """Loss and its analytic gradient at ``policy``.

    Log-probabilities, entropies and KL terms are recomputed from the
    current parameters. The importance weight comes from the log-probs
    stored at rollout time and is a constant multiplier.
    """
    if not batch:
        raise ContractError("loss needs a non-empty batch")
    n = len(batch)
    loss = 0.0
    grad = np.zeros_like(policy.theta)
    for rec in batch:
        s, a = rec.state, rec.action
        logp = pol.log_prob(policy, s, a)
        w = clipped_is_weight(rec.logp_theta, rec.logp_beta, config.c_clip)
        coef = w * rec.std_advantage
        loss += -coef * logp
        loss += -config.eta * pol.entropy(policy, s)
        loss += config.beta_kl * pol.kl_divergence(policy, behavior, s)
        if coef != 0.0:
            grad -= coef * pol.grad_log_prob(policy, s, a)
        if config.eta != 0.0:
            grad -= config.eta * pol.grad_entropy(policy, s)
        if config.beta_kl != 0.0:
            grad += config.beta_kl * pol.grad_kl(policy, behavior, s)
    return loss / n, grad / n


def _minibatch(n: int, size: int, rng: np.random.Generator) -> list[int]:
    if size >= n:
        return list(range(n))
    return sorted(int(i) for i in rng.choice(n, size=size, replace=False))


def train(dataset: Sequence[Case], config: TrainConfig, loop_config: LoopConfig,
          proxy: ProxyConfig | None = None, bins: int = pol.N_BINS,
          on_step: Callable[[dict], None] | None = None) -> PolicyParams:
    """Align a zero-initialized policy on ``dataset``; deterministic given ``config.seed``."""
    if not dataset:
        raise ContractError("training needs a non-empty dataset")
    proxy = proxy or ProxyConfig()
    loop_config = replace(loop_config, evidence_source=PROXY)
    p0_map = resolve_p0(loop_config, dataset)
    policy = PolicyParams.zeros(loop_config.t_max, bins)
    behavior = policy.copy()

    for step in range(config.steps):
        idx = _minibatch(len(dataset), config.batch_size, stream(config.seed, "minibatch", step))
        records: list[RolloutRecord] = []
        rewards_all, n_probed = [], 0
        for i in idx:
            case = dataset[i]
            episodes = [
                run_episode(case, policy, proxy, loop_config,
                            derive_seed(config.seed, "rollout", step, case.id, k), p0_map[case.concept])
                for k in range(config.K)
            ]
            rewards = [terminal_reward(e.p_final, case.label) for e in episodes]
            for ep, adv in zip(episodes, self_critical_advantages(rewards)):
                state, action = ep.terminal_state(policy)
                records.append(make_record(adv, state, action, policy, behavior))
            rewards_all.extend(rewards)
            n_probed += sum(e.probed for e in episodes)

        std = standardize([r.advantage for r in records])
        records = [replace(r, std_advantage=a) for r, a in zip(records, std)]
        loss, grad = loss_and_gradient(records, policy, behavior, config)
        # replace-on-publish: rollouts above only ever saw the old table
        policy = PolicyParams(policy.theta - config.learning_rate * grad)
        if (step + 1) % config.sync_period == 0:
            behavior = policy.copy()

        if on_step is not None or log.isEnabledFor(logging.DEBUG):
            entry = {
                "step": step,
                "loss": loss,
                "mean_reward": float(np.mean(rewards_all)),
                "entropy": float(np.mean([r.entropy for r in records])),
                "kl": float(np.mean([r.kl for r in records])),
                "pg_rate": n_probed / len(rewards_all),
            }
            if on_step is not None:
                on_step(entry)
            log.debug("train %s", json.dumps(entry))
    return policy
