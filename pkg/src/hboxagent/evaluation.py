"""Evaluation protocol: calibration metrics, behavioral rates, interventions
and sweeps over the loop's control knobs."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .belief import fit_overlay_temperature, temperature_overlay
from .environment import Case, Roi, mask_roi, random_roi
from .errors import ConfigError, ContractError
from .kbcs import FALLBACK, KbcsConfig, probe
from .loop import DISABLED, GATE, KBCS, MIX, PRIOR, EpisodeResult, LoopConfig, resolve_p0, run_batch
from .policy import Action, PolicyParams
from .rng import stream

log = logging.getLogger(__name__)

N_BINS = 15
N_RANDOM = 20
PLACEBO_ATTEMPTS = 100

VARIANTS = {
    "noP&G": (DISABLED, MIX),
    "Prior-Mix": (PRIOR, MIX),
    "KBCS-Mix": (KBCS, MIX),
    "KBCS-Gate": (KBCS, GATE),
}
_ALIASES = {k.lower().replace("&", ""): k for k in VARIANTS}


def canonical_variant(name: str) -> str:
    key = name.lower().replace("&", "")
    if key not in _ALIASES:
        raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return _ALIASES[key]


def variant_loop_config(name: str, base: LoopConfig | None = None) -> LoopConfig:
    source, mode = VARIANTS[canonical_variant(name)]
    return replace(base or LoopConfig(), evidence_source=source, fusion_mode=mode)


# -- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class ReliabilityBin:
    bin_index: int
    mean_confidence: float
    empirical_accuracy: float
    count: int


@dataclass(frozen=True)
class Metrics:
    brier: float
    ece: float
    pg_rate: float
    adoption_rate: float
    avg_steps: float
    mean_wall_ms: float
    n: int

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d["mean_wall_ms"] = None
        return d


def _check_pairs(preds: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float)
    g = np.asarray(labels, dtype=float)
    if p.size == 0:
        raise ContractError("metrics need at least one prediction")
    if p.shape != g.shape:
        raise ContractError(f"{p.size} predictions vs {g.size} labels")
    return p, g


def brier(preds: Sequence[float], labels: Sequence[int]) -> float:
    p, g = _check_pairs(preds, labels)
    return float(np.mean((p - g) ** 2))


def reliability_bins(preds: Sequence[float], labels: Sequence[int], n_bins: int = N_BINS) -> list[ReliabilityBin]:
    """Equal-width bins on the predicted positive probability; p = 1 joins the last bin."""
    p, g = _check_pairs(preds, labels)
    idx = np.minimum((p * n_bins).astype(int), n_bins - 1)
    out = []
    for k in range(n_bins):
        sel = idx == k
        c = int(sel.sum())
        if c:
            out.append(ReliabilityBin(k, float(p[sel].mean()), float(g[sel].mean()), c))
        else:
            out.append(ReliabilityBin(k, 0.0, 0.0, 0))
    return out


def ece(bins: Sequence[ReliabilityBin]) -> float:
    n = sum(b.count for b in bins)
    if n == 0:
        raise ContractError("ECE needs at least one prediction")
    return float(sum(b.count / n * abs(b.mean_confidence - b.empirical_accuracy) for b in bins if b.count))


def behavioral_rates(episodes: Sequence[EpisodeResult]) -> tuple[float, float, float, float]:
    """(P&G rate, adoption rate, mean steps, mean wall ms)."""
    if not episodes:
        raise ContractError("behavioral rates need at least one episode")
    n = len(episodes)
    pg = sum(any(s.action is Action.PROBE_GROUND for s in e.steps) for e in episodes) / n
    adopted = sum(e.adopted for e in episodes) / n
    steps = sum(len(e.steps) for e in episodes) / n
    wall = sum(e.wall_ms for e in episodes) / n
    return pg, adopted, steps, wall


def compute_metrics(episodes: Sequence[EpisodeResult], preds: Sequence[float] | None = None,
                    n_bins: int = N_BINS) -> tuple[Metrics, list[ReliabilityBin]]:
    preds = [e.p_final for e in episodes] if preds is None else list(preds)
    labels = [e.label for e in episodes]
    bins = reliability_bins(preds, labels, n_bins)
    pg, adopted, steps, wall = behavioral_rates(episodes)
    return Metrics(brier(preds, labels), ece(bins), pg, adopted, steps, wall, len(episodes)), bins


# -- evaluation runs -----------------------------------------------------------

@dataclass
class EvalResult:
    variant: str
    metrics: Metrics
    bins: list[ReliabilityBin]
    traces: list[EpisodeResult]


def _tool_for(loop: LoopConfig, kbcs: KbcsConfig | None):
    if loop.evidence_source == KBCS:
        if kbcs is None:
            raise ConfigError("KBCS variants need a kbcs config with per-concept calibration")
        return kbcs
    return None


def evaluate(dataset: Sequence[Case], policy: PolicyParams, variant: str, seed: int,
             loop: LoopConfig | None = None, kbcs: KbcsConfig | None = None, workers: int = 1,
             p0_map: Mapping[str, float] | None = None) -> EvalResult:
    name = canonical_variant(variant)
    cfg = variant_loop_config(name, loop)
    traces = run_batch(dataset, policy, _tool_for(cfg, kbcs), cfg, seed, workers,
                       dict(p0_map) if p0_map is not None else None)
    metrics, bins = compute_metrics(traces)
    return EvalResult(name, metrics, bins, traces)


# -- agent-level ROI masking -------------------------------------------------------

@dataclass(frozen=True)
class InterventionReport:
    cohort_size: int
    brier_before: float | None
    brier_after: float | None
    delta_brier: float | None
    ece_before: float | None
    ece_after: float | None
    delta_ece: float | None
    roi_less_adoptions: int = 0
    placebo: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def _placebo_roi(case: Case, avoid: Sequence[Roi], seed: int) -> Roi | None:
    size = avoid[0]
    rng = stream(seed, "placebo", case.id)
    blocked = list(avoid) + ([case.gt_roi] if case.gt_roi is not None else [])
    for _ in range(PLACEBO_ATTEMPTS):
        cand = random_roi(case.width, case.height, size.w, size.h, rng)
        if not any(cand.intersects(b) for b in blocked):
            return cand
    return None


def intervene(dataset: Sequence[Case], policy: PolicyParams, variant: str, seed: int,
              loop: LoopConfig | None = None, kbcs: KbcsConfig | None = None, workers: int = 1,
              placebo: bool = False) -> InterventionReport:
    """Mask the ROI each adopting episode relied on and replay it with the same seed.

    With ``placebo`` the mask goes to a same-size region disjoint from both
    the adopted ROI and any ground-truth ROI instead.
    """
    name = canonical_variant(variant)
    cfg = variant_loop_config(name, loop)
    if cfg.evidence_source != KBCS or kbcs is None or kbcs.backend != FALLBACK:
        raise ConfigError("intervention needs a KBCS variant on the fallback (ROI-producing) backend")
    p0_map = resolve_p0(cfg, dataset)
    before = run_batch(dataset, policy, kbcs, cfg, seed, workers, p0_map)

    cohort_cases, cohort_before = [], []
    roi_less = 0
    for case, ep in zip(dataset, before):
        rois = ep.adopted_rois
        if not rois:
            roi_less += int(ep.adopted)
            continue
        if placebo:
            alt = _placebo_roi(case, rois, seed)
            if alt is None:
                log.warning("no placebo ROI fits case %s; skipped", case.id)
                continue
            rois = [alt]
        image = case.image
        for r in rois:
            image = mask_roi(image, r)
        cohort_cases.append(case.with_image(image))
        cohort_before.append(ep)

    if not cohort_cases:
        return InterventionReport(0, None, None, None, None, None, None, roi_less, placebo)
    after = run_batch(cohort_cases, policy, kbcs, cfg, seed, workers, p0_map)
    mb, _ = compute_metrics(cohort_before)
    ma, _ = compute_metrics(after)
    return InterventionReport(len(cohort_cases), mb.brier, ma.brier, ma.brier - mb.brier,
                              mb.ece, ma.ece, ma.ece - mb.ece, roi_less, placebo)


# -- tool-level occlusion ------------------------------------------------------------

@dataclass(frozen=True)
class OcclusionReport:
    real_drop_mean: float
    rand_drop_mean: float
    diff: float
    cohens_d: float
    n_cases: int
    n_random: int
    roi_source: str

    def to_dict(self) -> dict:
        return asdict(self)


def cohens_d(a: Sequence[float], b: Sequence[float]) -> float:
    """(mean(a) - mean(b)) / pooled sample std.

    Zero pooled spread gives 0 when the means agree and a signed infinity
    otherwise.
    """
    x, y = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    nx, ny = x.size, y.size
    diff = float(x.mean() - y.mean())
    if nx + ny <= 2:
        pooled = 0.0
    else:
        vx = float(x.var(ddof=1)) if nx > 1 else 0.0
        vy = float(y.var(ddof=1)) if ny > 1 else 0.0
        pooled = math.sqrt(((nx - 1) * vx + (ny - 1) * vy) / (nx + ny - 2))
    if pooled == 0.0:
        if diff == 0.0:
            return 0.0
        log.warning("zero pooled spread with unequal means; Cohen's d is unbounded")
        return math.copysign(math.inf, diff)
    return diff / pooled


def occlusion_drop(dataset: Sequence[Case], kbcs: KbcsConfig, roi_source: str = "gt",
                   n_random: int = N_RANDOM, seed: int = 0) -> OcclusionReport:
    """Score drop of the tool when its evidence region is masked, vs random regions."""
    roi_source = roi_source.lower()
    if roi_source not in ("gt", "pred"):
        raise ConfigError("roi_source must be 'gt' or 'pred'")
    if roi_source == "pred" and kbcs.backend != FALLBACK:
        raise ConfigError("predicted-ROI occlusion needs the fallback backend")
    real, rand = [], []
    for case in dataset:
        base = probe(case.image, case.concept, kbcs)
        if roi_source == "gt":
            if case.gt_roi is None:
                if case.label == 1:
                    log.warning("case %s has no gt_roi; skipped", case.id)
                continue
            roi = case.gt_roi
        else:
            roi = base.roi
        s0 = base.p_evidence
        real.append(s0 - probe(mask_roi(case.image, roi), case.concept, kbcs).p_evidence)
        rng = stream(seed, "occlusion", case.id)
        drops = []
        for _ in range(n_random):
            r = random_roi(case.width, case.height, roi.w, roi.h, rng)
            drops.append(s0 - probe(mask_roi(case.image, r), case.concept, kbcs).p_evidence)
        rand.append(float(np.mean(drops)) if drops else 0.0)
    if not real:
        raise ContractError(f"no cases usable for {roi_source} occlusion")
    real_mean, rand_mean = float(np.mean(real)), float(np.mean(rand))
    return OcclusionReport(real_mean, rand_mean, real_mean - rand_mean, cohens_d(real, rand),
                           len(real), n_random, roi_source)


# -- sweeps ------------------------------------------------------------------------

def sweep_gate(dataset: Sequence[Case], policy: PolicyParams, taus: Sequence[float], seed: int,
               loop: LoopConfig | None = None, kbcs: KbcsConfig | None = None,
               workers: int = 1) -> list[dict]:
    base = loop or LoopConfig()
    rows = []
    for tau in sorted(taus):
        cfg = replace(base, fusion=replace(base.fusion, gate_threshold=float(tau)))
        m = evaluate(dataset, policy, "KBCS-Gate", seed, cfg, kbcs, workers).metrics
        rows.append({"gate_threshold": float(tau), "adoption_rate": m.adoption_rate, "pg_rate": m.pg_rate,
                     "brier": m.brier, "ece": m.ece})
    return rows


def sweep_steps(dataset: Sequence[Case], policy: PolicyParams, t_max_list: Sequence[int], seed: int,
                variant: str = "Prior-Mix", loop: LoopConfig | None = None, kbcs: KbcsConfig | None = None,
                workers: int = 1) -> list[dict]:
    base = loop or LoopConfig()
    rows = []
    for t_max in sorted(t_max_list):
        m = evaluate(dataset, policy, variant, seed, replace(base, t_max=int(t_max)), kbcs, workers).metrics
        rows.append({"t_max": int(t_max), "brier": m.brier, "ece": m.ece, "avg_steps": m.avg_steps,
                     "pg_rate": m.pg_rate})
    return rows


# -- test-time temperature overlay ------------------------------------------------

def _overlaid(dataset: Sequence[Case], traces: Sequence[EpisodeResult], temps: Mapping[str, float]) -> list[float]:
    out = []
    for case, ep in zip(dataset, traces):
        if case.concept not in temps:
            raise ConfigError(f"no overlay temperature for concept {case.concept!r}")
        out.append(temperature_overlay(ep.p_final, float(temps[case.concept])))
    return out


def fit_overlay(calib: Sequence[Case], policy: PolicyParams, variant: str, seed: int,
                loop: LoopConfig | None = None, kbcs: KbcsConfig | None = None,
                workers: int = 1) -> dict[str, float]:
    """Per-concept overlay temperature fitted on a target-domain calibration split."""
    res = evaluate(calib, policy, variant, seed, loop, kbcs, workers)
    temps = {}
    for concept in sorted({c.concept for c in calib}):
        pairs = [(ep.p_final, ep.label) for c, ep in zip(calib, res.traces) if c.concept == concept]
        temps[concept] = fit_overlay_temperature([p for p, _ in pairs], [g for _, g in pairs])
    return temps


def overlay_eval(dataset: Sequence[Case], policy: PolicyParams, variant: str, temps: Mapping[str, float],
                 seed: int, loop: LoopConfig | None = None, kbcs: KbcsConfig | None = None,
                 workers: int = 1) -> tuple[Metrics, Metrics, EvalResult]:
    """Metrics before and after rescaling every final belief; traces are untouched."""
    for concept, t in temps.items():
        if not float(t) > 0:
            raise ConfigError(f"overlay temperature for {concept!r} must be > 0")
    res = evaluate(dataset, policy, variant, seed, loop, kbcs, workers)
    after, _ = compute_metrics(res.traces, _overlaid(dataset, res.traces, temps))
    return res.metrics, after, res
