"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Tolerances are fixed here and must not be relaxed to make a run pass.
"""

import hashlib
import shutil
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from hboxagent import evaluation as ev
from hboxagent import policy as pol
from hboxagent import rl
from hboxagent.belief import CalibrationParams, FusionConfig, fit_calibration, temperature_overlay
from hboxagent.cli import dispatch
from hboxagent.environment import GenSpec, generate_dataset
from hboxagent.kbcs import KbcsConfig, ProxyConfig, calibration_pairs
from hboxagent.loop import DISABLED, GATE, KBCS, MIX, PRIOR, PROXY, LoopConfig, run_episode
from hboxagent.policy import Action, AgentState, PolicyParams
from hboxagent.rl import RolloutRecord, TrainConfig
from oracles import brier_loop, central_difference, ece_loop, relative_error

pytestmark = pytest.mark.acceptance

ALL_TRACES: list = []
SPEC = GenSpec(prior_informativeness=3.0, seed=0)


def collect(res):
    ALL_TRACES.extend(res.traces)
    return res


@pytest.fixture(scope="module")
def eval_set():
    return generate_dataset(SPEC, 500, start=100_000)


@pytest.fixture(scope="module")
def trained():
    return rl.train(generate_dataset(SPEC, 500), TrainConfig(seed=0), LoopConfig(), ProxyConfig(3.0))


@pytest.fixture(scope="module")
def kbcs():
    calib = generate_dataset(SPEC, 300, start=200_000)
    pairs = calibration_pairs(calib, KbcsConfig())
    return KbcsConfig(calibrations={c: fit_calibration(p, c) for c, p in pairs.items()})


def test_01_no_probe_invariance():
    rng = np.random.default_rng(1)
    cases = generate_dataset(GenSpec(width=12, height=12, roi_size=3, seed=1), 40)
    tool_kb = KbcsConfig(window=3, calibrations={"finding": CalibrationParams("finding", 1.5, -0.2)})
    n_total = n_unprobed = violations = 0
    for block in range(24):
        params = PolicyParams(rng.normal(0.0, 2.0, size=(10, 3, 2, 4)))
        source = (PRIOR, PROXY, KBCS, DISABLED)[block % 4]
        mode = (MIX, GATE)[block % 2]
        p0 = float(rng.random())
        cfg = LoopConfig(evidence_source=source, fusion_mode=mode, p0=p0)
        tool = tool_kb if source == KBCS else ProxyConfig()
        for case in cases + cases[:10]:
            ep = run_episode(case, params, tool, cfg, seed=int(rng.integers(2**62)))
            ALL_TRACES.append(ep)
            n_total += 1
            if not any(s.action is Action.PROBE_GROUND for s in ep.steps):
                n_unprobed += 1
                violations += ep.p_final != ep.p0
    ok = n_total >= 1000 and n_unprobed > 0 and violations == 0
    record_criterion(1, "no-probe invariance", ok,
                     f"{n_total} episodes, {n_unprobed} without a probe, {violations} violations")
    assert ok


def test_03_gradient_correctness():
    worst_lp = worst_loss = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        params = PolicyParams(rng.normal(0.0, 1.5, size=(10, 3, 2, 4)))
        state = AgentState(int(rng.integers(10)), int(rng.integers(1, 4)), bool(rng.integers(2)))
        valid = np.flatnonzero(state.valid())
        action = Action(int(rng.choice(valid)))
        num = central_difference(lambda th: pol.log_prob(PolicyParams(th), state, action), params.theta.copy())
        worst_lp = max(worst_lp, relative_error(pol.grad_log_prob(params, state, action), num))

        behavior = PolicyParams(params.theta + rng.normal(0.0, 0.5, size=params.theta.shape))
        batch = []
        for _ in range(8):
            s = AgentState(int(rng.integers(10)), int(rng.integers(1, 4)), bool(rng.integers(2)))
            a = Action(int(rng.choice(np.flatnonzero(s.valid()))))
            rec = rl.make_record(float(rng.normal()), s, a, params, behavior)
            batch.append(RolloutRecord(**{**rec.__dict__, "std_advantage": float(rng.normal())}))
        cfg = TrainConfig(eta=float(rng.uniform(0, 0.2)), beta_kl=float(rng.uniform(0, 0.5)))
        _, grad = rl.loss_and_gradient(batch, params, behavior, cfg)
        num = central_difference(lambda th: rl.loss_and_gradient(batch, PolicyParams(th), behavior, cfg)[0],
                                 params.theta.copy())
        worst_loss = max(worst_loss, relative_error(grad, num))
    ok = worst_lp <= 1e-4 and worst_loss <= 1e-4
    record_criterion(3, "gradient correctness", ok,
                     f"50+50 instances, worst rel err log-prob {worst_lp:.1e}, loss {worst_loss:.1e}")
    assert ok


def test_04_advantage_identities(monkeypatch):
    batches = []
    real = rl.loss_and_gradient

    def spy(batch, policy, behavior, config):
        batches.append(list(batch))
        return real(batch, policy, behavior, config)

    monkeypatch.setattr(rl, "loss_and_gradient", spy)
    cfg = TrainConfig(steps=25, batch_size=8, sync_period=5, K=4, seed=3)
    rl.train(generate_dataset(GenSpec(width=12, height=12, roi_size=3, seed=4), 60), cfg, LoopConfig())

    worst_sum = worst_mean = worst_std = 0.0
    w_after_sync = []
    for step, batch in enumerate(batches):
        adv = np.array([r.advantage for r in batch])
        for g in range(0, len(batch), cfg.K):
            worst_sum = max(worst_sum, abs(float(adv[g:g + cfg.K].sum())))
        std_adv = np.array([r.std_advantage for r in batch])
        if adv.std() >= 1e-8:
            worst_mean = max(worst_mean, abs(float(std_adv.mean())))
            worst_std = max(worst_std, abs(float(std_adv.std()) - 1.0))
        if step % cfg.sync_period == 0:
            w_after_sync.extend(rl.clipped_is_weight(r.logp_theta, r.logp_beta, cfg.c_clip) for r in batch)
    ok = (len(batches) == 25 and worst_sum <= 1e-12 and worst_mean <= 1e-9 and worst_std <= 1e-6
          and w_after_sync and all(w == 1.0 for w in w_after_sync))
    record_criterion(4, "advantage identities", ok,
                     f"group sum {worst_sum:.1e}, std mean {worst_mean:.1e}, std dev {worst_std:.1e}, "
                     f"{len(w_after_sync)} weights after sync all 1")
    assert ok


def test_05_metric_oracle_equivalence():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 400))
        preds = rng.random(n)
        # exercise the bin edges and the p = 1 endpoint as well
        preds[: n // 10] = rng.integers(0, 16, size=n // 10) / 15
        labels = rng.integers(0, 2, size=n)
        worst = max(worst, abs(ev.brier(preds, labels) - brier_loop(preds.tolist(), labels.tolist())),
                    abs(ev.ece(ev.reliability_bins(preds, labels)) - ece_loop(preds.tolist(), labels.tolist())))
    examples = [
        ev.brier([1.0, 0.0], [1, 0]) == 0.0,
        ev.brier([0.5] * 6, [1, 1, 0, 1, 0, 0]) == 0.25,
        abs(ev.brier([0.8], [1]) - 0.04) <= 1e-15,
        ev.ece(ev.reliability_bins([0.5] * 8, [1, 0] * 4)) == 0.0,
        ev.ece(ev.reliability_bins([1.0, 1.0], [1, 0])) == 0.5,
        abs(ev.ece(ev.reliability_bins([0.9] * 3, [1, 1, 0])) - (0.9 - 2 / 3)) <= 1e-9,
    ]
    ok = worst <= 1e-12 and all(examples)
    record_criterion(5, "metric oracle equivalence", ok,
                     f"worst diff {worst:.1e} over 100 sets, {sum(examples)}/6 exact examples")
    assert ok


def test_06_prior_mix_and_training(eval_set, trained):
    zero = PolicyParams.zeros()
    nopg = collect(ev.evaluate(eval_set, trained, "noP&G", 1)).metrics
    mix_trained = collect(ev.evaluate(eval_set, trained, "Prior-Mix", 1)).metrics
    mix_zero = collect(ev.evaluate(eval_set, zero, "Prior-Mix", 1)).metrics
    ok = (mix_trained.brier <= nopg.brier - 0.05 and mix_trained.brier <= mix_zero.brier
          and mix_trained.pg_rate > mix_zero.pg_rate)
    record_criterion(6, "Prior-Mix gain and RL improvement", ok,
                     f"noP&G {nopg.brier:.4f}, Prior-Mix trained {mix_trained.brier:.4f} "
                     f"(pg {mix_trained.pg_rate:.3f}) vs zero-init {mix_zero.brier:.4f} (pg {mix_zero.pg_rate:.3f})")
    assert ok


def test_07_negative_transfer(eval_set, trained):
    bad = KbcsConfig(score_scale=10.0, calibrations={"finding": CalibrationParams("finding")})
    nopg = ev.evaluate(eval_set, trained, "noP&G", 1).metrics.brier
    mixed = collect(ev.evaluate(eval_set, trained, "KBCS-Mix", 1, kbcs=bad)).metrics
    ok = mixed.brier >= nopg - 0.01 and mixed.pg_rate > 0
    record_criterion(7, "negative transfer from miscalibrated scores", ok,
                     f"KBCS-Mix {mixed.brier:.4f} vs noP&G {nopg:.4f}")
    assert ok


def test_08_causal_faithfulness(eval_set, trained, kbcs):
    rows = []
    for seed in (1, 2, 3):
        real = ev.intervene(eval_set, trained, "KBCS-Mix", seed, kbcs=kbcs)
        placebo = ev.intervene(eval_set, trained, "KBCS-Mix", seed, kbcs=kbcs, placebo=True)
        rows.append((real.cohort_size, real.delta_brier, placebo.cohort_size, placebo.delta_brier))
    ok = all(n >= 30 and d is not None and d > 0 and pn > 0 and abs(pd) <= 0.005 for n, d, pn, pd in rows)
    detail = "; ".join(f"N={n} d={d:+.4f} placebo N={pn} d={pd:+.1e}" for n, d, pn, pd in rows)
    record_criterion(8, "causal faithfulness of adopted ROIs", ok, detail)
    assert ok


def test_09_zero_drop_phenomenon(kbcs):
    two_peak = GenSpec(noise_sigma=0.0, signal_amplitude=1.0, n_peaks=2, positive_rate=1.0, seed=9)
    cal = KbcsConfig(calibrations={"finding": CalibrationParams("finding", 0.5, -1.0)})
    pred = ev.occlusion_drop(generate_dataset(two_peak, 100), cal, "pred", seed=0)
    positives = [c for c in generate_dataset(SPEC, 300, start=300_000) if c.label == 1]
    gt = ev.occlusion_drop(positives, kbcs, "gt", seed=0)
    ok = pred.real_drop_mean == 0.0 and pred.cohens_d == 0.0 and gt.real_drop_mean > gt.rand_drop_mean
    record_criterion(9, "zero-drop on two equal peaks", ok,
                     f"pred real {pred.real_drop_mean} d {pred.cohens_d}; gt real {gt.real_drop_mean:.4f} "
                     f"vs rand {gt.rand_drop_mean:.4f} (n={gt.n_cases})")
    assert ok


def test_10_gate_sweep(eval_set, trained, kbcs):
    taus = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5]
    rows = ev.sweep_gate(eval_set, trained, taus, 1, kbcs=kbcs)
    rates = [r["adoption_rate"] for r in rows]
    monotone = all(a >= b for a, b in zip(rates, rates[1:]))
    zero_high = all(r["adoption_rate"] == 0.0 for r in rows if r["gate_threshold"] >= 1.0)
    mix = collect(ev.evaluate(eval_set, trained, "KBCS-Mix", 1, kbcs=kbcs))
    loop = LoopConfig(fusion=FusionConfig(gate_threshold=0.0))
    gate0 = collect(ev.evaluate(eval_set, trained, "KBCS-Gate", 1, loop, kbcs))
    same = ([t.to_dict() for t in gate0.traces] == [t.to_dict() for t in mix.traces]
            and gate0.metrics.to_dict() == mix.metrics.to_dict() and rows[0]["brier"] == mix.metrics.brier)
    ok = monotone and zero_high and same
    record_criterion(10, "gate sweep", ok,
                     "adoption " + ",".join(f"{r:.3f}" for r in rates) + f"; tau=0 identical to Mix: {same}")
    assert ok


def test_11_step_sweep(eval_set, trained):
    rows = ev.sweep_steps(eval_set, trained, [1, 2, 3, 4, 5], 1)
    ok = rows[0]["t_max"] == 1 and rows[0]["avg_steps"] == 1.0 and all(r["avg_steps"] <= r["t_max"] for r in rows)
    record_criterion(11, "step sweep", ok, ", ".join(f"T={r['t_max']}:{r['avg_steps']:.2f}" for r in rows))
    assert ok


def test_12_calibration_recovery():
    rng = np.random.default_rng(12)
    m = rng.normal(0.0, 8.0, size=10_000)
    g = (rng.random(10_000) < 1.0 / (1.0 + np.exp(-(m / 4.0 + 0.5)))).astype(int)
    fit = fit_calibration(list(zip(m.tolist(), g.tolist())), "c")
    ok = abs(fit.temperature - 4.0) <= 0.4 and abs(fit.bias - 0.5) <= 0.1
    record_criterion(12, "calibration recovery", ok, f"T={fit.temperature:.3f}, b={fit.bias:.3f}")
    assert ok


def test_13_overlay(eval_set, trained, kbcs):
    shifted = KbcsConfig(score_scale=2.0, calibrations=kbcs.calibrations)
    calib, held = eval_set[:100], eval_set[100:]
    temps = ev.fit_overlay(calib, trained, "KBCS-Mix", 1, kbcs=shifted)
    before, after, res = ev.overlay_eval(held, trained, "KBCS-Mix", temps, 1, kbcs=shifted)
    collect(res)
    flips = sum((ep.p_final >= 0.5) != (temperature_overlay(ep.p_final, temps[c.concept]) >= 0.5)
                for c, ep in zip(held, res.traces))
    ok = after.ece < before.ece and flips == 0 and after.pg_rate == before.pg_rate
    record_criterion(13, "temperature overlay under score shift", ok,
                     f"T={temps['finding']:.2f}, ECE {before.ece:.4f} -> {after.ece:.4f}, class flips {flips}")
    assert ok


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_14_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    data = "data/cases.jsonl"
    base = ["--set", "kbcs.window=3"]
    commands = [
        ["gen-data", "--n", "80", "--seed", "2", "--width", "16", "--height", "16", "--roi-size", "3", "--out", data],
        ["calibrate", "--data", data, *base, "--out-dir", "cal"],
        ["train", "--data", data, "--out", "pol/policy.json", "--log", "pol/log.jsonl", "--set", "train.steps=20",
         "--set", "train.batch_size=8"],
        ["eval", "--data", data, "--policy", "pol/policy.json", "--calibration", "cal/calibration.json",
         "--variant", "KBCS-Mix", *base, "--out-dir", "eval"],
        ["eval", "--data", data, "--variant", "noP&G", "--out-dir", "eval0"],
        ["intervene", "--data", data, "--policy", "pol/policy.json", "--calibration", "cal/calibration.json",
         "--variant", "KBCS-Mix", *base, "--out-dir", "int"],
        ["occlusion", "--data", data, "--calibration", "cal/calibration.json", "--roi-source", "pred",
         "--n-random", "4", *base, "--out-dir", "occ"],
        ["sweep-gate", "--data", data, "--policy", "pol/policy.json", "--calibration", "cal/calibration.json",
         "--taus", "0,0.1,1", *base, "--out-dir", "sg"],
        ["sweep-steps", "--data", data, "--policy", "pol/policy.json", "--t-max-list", "1,2,3", "--out-dir", "ss"],
        ["overlay", "--data", data, "--policy", "pol/policy.json", "--calibration", "cal/calibration.json",
         "--variant", "KBCS-Mix", "--calib-split", "30", "--set", "kbcs.score_scale=2", *base, "--out-dir", "ov"],
        ["report", "--metrics", "eval/metrics.json", "eval0/metrics.json", "--baseline", "eval0/metrics.json",
         "--out-dir", "rep"],
    ]
    snapshots = []
    codes = []
    for workers in ("1", "2", "1"):
        for entry in list(tmp_path.iterdir()):
            shutil.rmtree(entry)
        for cmd in commands:
            codes.append(dispatch([*cmd, "--workers", workers]))
        snapshots.append(_tree(tmp_path))
    files = sorted(snapshots[0])
    differing = [f for f in files if len({s.get(f) for s in snapshots}) != 1]
    digest = hashlib.sha256(b"".join(snapshots[0][f] for f in files)).hexdigest()[:12]
    ok = all(c == 0 for c in codes) and len(files) >= 30 and not differing and all(set(s) == set(files)
                                                                                 for s in snapshots)
    record_criterion(14, "CLI determinism across reruns and --workers", ok,
                     f"{len(files)} files x 3 runs (workers 1,2,1), differing: {differing or 'none'}, tree {digest}")
    assert ok


def test_02_claim_masking():
    # runs last so it sees every trace produced by the criteria above
    claims_unprobed = sum(1 for ep in ALL_TRACES for s in ep.steps
                          if s.action is Action.CLAIM and not s.probed_before)
    n_claims = sum(1 for ep in ALL_TRACES for s in ep.steps if s.action is Action.CLAIM)
    ok = len(ALL_TRACES) >= 1000 and claims_unprobed == 0
    record_criterion(2, "Claim never precedes a probe", ok,
                     f"{len(ALL_TRACES)} traces, {n_claims} Claims, {claims_unprobed} before any probe")
    assert ok
