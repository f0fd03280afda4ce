"""The H-Box reasoning loop: one auditable diagnostic episode per case."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .belief import FusionConfig, fuse_gate, fuse_mix, sharpen
from .environment import Case
from .errors import ConfigError, ToolError
from .kbcs import EvidenceReport, KbcsConfig, ProxyConfig, probe, proxy_score, score_report
from .policy import Action, AgentState, PolicyParams, featurize, masked_logits, safe_sample
from .rng import derive_seed, stream

PRIOR, KBCS, PROXY, DISABLED = "prior", "kbcs", "proxy", "disabled"
EVIDENCE_SOURCES = (PRIOR, KBCS, PROXY, DISABLED)
MIX, GATE = "mix", "gate"
FUSION_MODES = (MIX, GATE)
PREVALENCE = "prevalence"


@dataclass(frozen=True)
class LoopConfig:
    t_max: int = 3
    fusion: FusionConfig = field(default_factory=FusionConfig)
    evidence_source: str = PRIOR
    fusion_mode: str = MIX
    # a fixed starting belief, or PREVALENCE for per-concept label rates
    p0: float | str = 0.5

    def __post_init__(self):
        if self.t_max < 1:
            raise ConfigError("loop.t_max must be >= 1")
        if self.evidence_source not in EVIDENCE_SOURCES:
            raise ConfigError(f"loop.evidence_source must be one of {EVIDENCE_SOURCES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"loop.fusion_mode must be one of {FUSION_MODES}")
        if isinstance(self.p0, str):
            if self.p0 != PREVALENCE:
                raise ConfigError(f"loop.p0 must be a probability or {PREVALENCE!r}")
        elif not 0.0 <= self.p0 <= 1.0:
            raise ConfigError("loop.p0 must lie in [0, 1]")


@dataclass(frozen=True)
class TraceStep:
    t: int
    p_before: float
    probed_before: bool
    action: Action
    evidence: EvidenceReport | None = None
    adopted: bool = False
    p_after: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "state_before": {"p": self.p_before, "probed": self.probed_before},
            "action": self.action.label,
            "evidence": self.evidence.to_dict() if self.evidence is not None else None,
            "adopted": self.adopted,
            "p_after": self.p_after,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TraceStep":
        ev = d.get("evidence")
        return cls(int(d["t"]), float(d["state_before"]["p"]), bool(d["state_before"]["probed"]),
                   Action.from_label(d["action"]), EvidenceReport.from_dict(ev) if ev else None,
                   bool(d["adopted"]), float(d["p_after"]), d.get("error"))


@dataclass(frozen=True)
class EpisodeResult:
    case_id: str
    label: int
    p0: float
    steps: tuple[TraceStep, ...]
    p_final: float
    probed: bool
    seed: int
    allow_probe: bool = True
    wall_ms: float = 0.0

    @property
    def adopted(self) -> bool:
        return any(s.adopted for s in self.steps)

    @property
    def adopted_rois(self) -> list:
        out = []
        for s in self.steps:
            if s.adopted and s.evidence is not None and s.evidence.roi is not None and s.evidence.roi not in out:
                out.append(s.evidence.roi)
        return out

    def terminal_state(self, policy: PolicyParams) -> tuple[AgentState, Action]:
        last = self.steps[-1]
        return featurize(last.p_before, last.t, last.probed_before, policy, self.allow_probe), last.action

    def to_dict(self, timing: bool = False) -> dict:
        return {
            "case_id": self.case_id,
            "label": self.label,
            "p0": self.p0,
            "steps": [s.to_dict() for s in self.steps],
            "p_final": self.p_final,
            "probed": self.probed,
            "allow_probe": self.allow_probe,
            "seed": self.seed,
            "wall_ms": self.wall_ms if timing else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeResult":
        return cls(d["case_id"], int(d["label"]), float(d["p0"]),
                   tuple(TraceStep.from_dict(s) for s in d["steps"]), float(d["p_final"]), bool(d["probed"]),
                   int(d["seed"]), bool(d.get("allow_probe", True)), float(d.get("wall_ms") or 0.0))


def _obtain_evidence(case: Case, tool, source: str, seed: int, t: int, evidence_rng) -> EvidenceReport:
    call_seed = derive_seed(seed, "probe", t)
    if source == PRIOR:
        if case.prior_score is None:
            raise ToolError(f"case {case.id} has no prior_score")
        return score_report(case.prior_score, "prior", call_seed)
    if source == KBCS:
        if not isinstance(tool, KbcsConfig):
            raise ToolError("KBCS evidence requested without a KBCS tool config")
        return probe(case.image, case.concept, tool, call_seed)
    if source == PROXY:
        cfg = tool if isinstance(tool, ProxyConfig) else ProxyConfig()
        return score_report(proxy_score(case, cfg, evidence_rng), "proxy", call_seed)
    raise ToolError(f"probing is switched off for evidence source {source!r}")


def run_episode(case: Case, policy: PolicyParams, tool, config: LoopConfig, seed: int,
                p0: float | None = None) -> EpisodeResult:
    """Run one episode; a pure function of its arguments apart from ``wall_ms``."""
    start = time.perf_counter()
    if p0 is None:
        if isinstance(config.p0, str):
            raise ConfigError("prevalence-based p0 must be resolved by the caller")
        p0 = float(config.p0)
    fusion = config.fusion
    allow_probe = config.evidence_source != DISABLED
    action_rng = stream(seed, "action")
    evidence_rng = stream(seed, "evidence")

    p, probed = p0, False
    steps: list[TraceStep] = []
    for t in range(1, config.t_max + 1):
        state = featurize(p, t, probed, policy, allow_probe)
        action = safe_sample(masked_logits(policy, state), action_rng)
        p_before, probed_before = p, probed
        if action is Action.PROBE_GROUND:
            evidence, adopted, error = None, False, None
            try:
                evidence = _obtain_evidence(case, tool, config.evidence_source, seed, t, evidence_rng)
            except (ToolError, ValueError) as exc:
                error = str(exc)
            if evidence is not None:
                if config.fusion_mode == MIX:
                    p, adopted = fuse_mix(p, evidence.p_evidence, fusion.alpha), True
                else:
                    p, adopted = fuse_gate(p, evidence.p_evidence, fusion.alpha, fusion.gate_threshold)
            probed = True
            steps.append(TraceStep(t, p_before, probed_before, action, evidence, adopted, p, error))
            continue
        if action is Action.CLAIM:
            p = sharpen(p, fusion.gamma, fusion.epsilon)
        elif action is Action.ABSTAIN:
            p = 0.5
        steps.append(TraceStep(t, p_before, probed_before, action, None, False, p))
        break

    # an episode that never probed keeps its starting belief
    p_final = p if probed else p0
    wall_ms = (time.perf_counter() - start) * 1e3
    return EpisodeResult(case.id, case.label, p0, tuple(steps), p_final, probed, seed, allow_probe, wall_ms)


def resolve_p0(config: LoopConfig, cases: Sequence[Case]) -> dict[str, float]:
    """Starting belief per concept."""
    concepts = sorted({c.concept for c in cases})
    if not isinstance(config.p0, str):
        return {c: float(config.p0) for c in concepts}
    out = {}
    for concept in concepts:
        labels = [c.label for c in cases if c.concept == concept]
        out[concept] = sum(labels) / len(labels)
    return out


def episode_seed(master_seed: int, case_id: str) -> int:
    return derive_seed(master_seed, "episode", case_id)


def _run_one(args) -> EpisodeResult:
    case, policy, tool, config, seed, p0 = args
    return run_episode(case, policy, tool, config, seed, p0)


def run_batch(cases: Sequence[Case], policy: PolicyParams, tool, config: LoopConfig, master_seed: int,
              workers: int = 1, p0_map: dict[str, float] | None = None) -> list[EpisodeResult]:
    """One episode per case, in input order; identical for any ``workers``."""
    if not cases:
        return []
    if p0_map is None:
        p0_map = resolve_p0(config, cases)
    jobs = [(c, policy, tool, config, episode_seed(master_seed, c.id), p0_map[c.concept]) for c in cases]
    if workers <= 1 or len(jobs) < 2:
        return [_run_one(j) for j in jobs]
    chunk = max(1, len(jobs) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs, chunksize=chunk))


def save_traces(results: Iterable[EpisodeResult], path: str | Path, timing: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(timing), separators=(",", ":")))
            fh.write("\n")


def load_traces(path: str | Path) -> list[EpisodeResult]:
    with open(path, encoding="utf-8") as fh:
        return [EpisodeResult.from_dict(json.loads(line)) for line in fh if line.strip()]
