"""Command-line interface for data generation, training and evaluation runs.

Every subcommand resolves a flat run config (defaults < ``--config`` file <
``--set key=value`` < explicit flags), writes its artifacts into an output
directory together with ``resolved-config.txt`` and a ``manifest.json``
listing each file with its SHA-256.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import evaluation as ev
from .belief import fit_calibration
from .config import RunConfig, load_config, save_calibrations
from .environment import generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, ContractError, DatasetFormatError, DegenerateFitError, GenerationError
from .kbcs import calibration_pairs
from .loop import save_traces
from .policy import PolicyParams
from .report import bins_csv, reliability_svg, rows_csv, summary_table
from .rl import train

log = logging.getLogger("hboxagent")

COMMANDS = ("gen-data", "calibrate", "train", "eval", "intervene", "occlusion", "sweep-gate", "sweep-steps",
            "overlay", "report")


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, command: str, cfg: RunConfig, out_dir: Path):
        self.command = command
        self.cfg = cfg
        self.out_dir = out_dir
        self.files: list[Path] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def written(self, path: Path) -> Path:
        self.files.append(Path(path))
        return path

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text, encoding="utf-8")
        return self.written(p)

    def write_json(self, name: str, obj: Any) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self) -> None:
        self.write_text("resolved-config.txt", self.cfg.render())
        entries = []
        for f in sorted(set(self.files), key=lambda p: str(p)):
            try:
                name = str(f.resolve().relative_to(self.out_dir.resolve()))
            except ValueError:
                name = str(f)
            entries.append({"path": name, "sha256": hashlib.sha256(f.read_bytes()).hexdigest()})
        manifest = {"command": self.command, "files": entries}
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- argument parsing ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_dir_default: str | None = ".") -> None:
    p.add_argument("--config", help="flat key=value run config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-dir", default=None, help=f"output directory (default {out_dir_default})")
    p.add_argument("-v", "--verbose", action="store_true")


def _eval_inputs(p: argparse.ArgumentParser, variant: bool = True) -> None:
    p.add_argument("--data")
    p.add_argument("--policy", help="policy JSON; omitted means the zero-initialized policy")
    p.add_argument("--calibration", help="per-concept calibration JSON for KBCS variants")
    if variant:
        p.add_argument("--variant")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hboxagent", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p, "directory of --out")
    p.add_argument("--n", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--roi-size", type=int)
    p.add_argument("--pos-rate", type=float)
    p.add_argument("--peaks", type=int)
    p.add_argument("--prior-info", type=float)
    p.add_argument("--concepts")
    p.add_argument("--domain-tag")
    p.add_argument("--start", type=int, help="index of the first generated case")
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate", help="fit per-concept KBCS score calibration")
    _common(p)
    p.add_argument("--data")

    p = sub.add_parser("train", help="train the action policy with clipped policy gradient")
    _common(p, "directory of --out")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-step JSON-lines training log")

    p = sub.add_parser("eval", help="evaluate one variant")
    _common(p)
    _eval_inputs(p)

    p = sub.add_parser("intervene", help="agent-level ROI masking intervention")
    _common(p)
    _eval_inputs(p)
    p.add_argument("--placebo", action="store_true", help="mask a disjoint same-size region instead")

    p = sub.add_parser("occlusion", help="tool-level occlusion drop vs random regions")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--calibration")
    p.add_argument("--roi-source", choices=("gt", "pred"))
    p.add_argument("--n-random", type=int)

    p = sub.add_parser("sweep-gate", help="sweep the gate threshold of KBCS-Gate")
    _common(p)
    _eval_inputs(p, variant=False)
    p.add_argument("--taus", help="comma-separated thresholds")

    p = sub.add_parser("sweep-steps", help="sweep the step budget")
    _common(p)
    _eval_inputs(p)
    p.add_argument("--t-max-list", help="comma-separated step budgets")

    p = sub.add_parser("overlay", help="test-time temperature overlay on a shifted dataset")
    _common(p)
    _eval_inputs(p)
    p.add_argument("--calib-split", type=int, help="leading cases used to fit the overlay temperature")

    p = sub.add_parser("report", help="summary table and bubble diagrams from metrics files")
    _common(p)
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--baseline", help="metrics JSON drawn in gray behind every diagram")
    return parser


_FLAG_KEYS = {
    "seed": "seed", "workers": "workers", "n": "gen.n", "width": "gen.width", "height": "gen.height",
    "noise": "gen.noise", "amplitude": "gen.amplitude", "roi_size": "gen.roi_size", "pos_rate": "gen.pos_rate",
    "peaks": "gen.peaks", "prior_info": "gen.prior_info", "concepts": "gen.concepts",
    "domain_tag": "gen.domain_tag", "start": "gen.start", "data": "paths.data", "policy": "paths.policy",
    "calibration": "kbcs.calibration", "variant": "variant", "roi_source": "eval.roi_source",
    "n_random": "eval.n_random", "taus": "sweep.taus", "t_max_list": "sweep.t_max_list",
    "calib_split": "overlay.calib_split",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    cfg.update({key: getattr(args, flag) for flag, key in _FLAG_KEYS.items() if hasattr(args, flag)})
    if getattr(args, "placebo", False):
        cfg.set("eval.placebo", "true")
    return cfg


# -- helpers ------------------------------------------------------------------------

def _dataset(cfg: RunConfig):
    path = cfg["paths.data"]
    if not path:
        raise ConfigError("'paths.data' is required (use --data)")
    if not Path(path).is_file():
        raise ConfigError(f"dataset not found for 'paths.data': {path}")
    return load_dataset(path)


def _policy(cfg: RunConfig) -> PolicyParams:
    path = cfg["paths.policy"]
    if not path:
        return PolicyParams.zeros(cfg["loop.t_max"], cfg["policy.bins"])
    if not Path(path).is_file():
        raise ConfigError(f"policy not found for 'paths.policy': {path}")
    return PolicyParams.load(path)


def _metrics_blob(res: ev.EvalResult, cfg: RunConfig) -> dict:
    return {
        "variant": res.variant,
        "metrics": res.metrics.to_dict(cfg["timing"]),
        "bins": [b.__dict__ for b in res.bins],
    }


def _write_eval(run: Run, res: ev.EvalResult, prefix: str = "") -> None:
    cfg = run.cfg
    blob = _metrics_blob(res, cfg)
    run.write_json(f"{prefix}metrics.json", blob)
    run.write_text(f"{prefix}bins.csv", bins_csv(blob["bins"]))
    save_traces(res.traces, run.path(f"{prefix}traces.jsonl"), cfg["timing"])
    run.written(run.path(f"{prefix}traces.jsonl"))
    if cfg["eval.svg"]:
        run.write_text(f"{prefix}reliability.svg", reliability_svg([(res.variant, blob["bins"])], title=res.variant))


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(run: Run, args) -> None:
    cfg = run.cfg
    cases = generate_dataset(cfg.gen_spec(), cfg["gen.n"], cfg["gen.start"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(cases, out)
    run.written(out)
    log.info("wrote %d cases to %s", len(cases), out)


def cmd_calibrate(run: Run, args) -> None:
    cases = _dataset(run.cfg)
    pairs = calibration_pairs(cases, run.cfg.kbcs(calibrations={}))
    cals = {c: fit_calibration(p, c) for c, p in sorted(pairs.items())}
    save_calibrations(cals, run.path("calibration.json"))
    run.written(run.path("calibration.json"))


def cmd_train(run: Run, args) -> None:
    cfg = run.cfg
    cases = _dataset(cfg)
    entries: list[dict] = []
    policy = train(cases, cfg.train(), cfg.loop(), cfg.proxy(), cfg["policy.bins"], entries.append)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    policy.save(out)
    run.written(out)
    if args.log:
        log_path = Path(args.log)
        log_path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))
        run.written(log_path)


def cmd_eval(run: Run, args) -> None:
    cfg = run.cfg
    res = ev.evaluate(_dataset(cfg), _policy(cfg), cfg["variant"], cfg["seed"], cfg.loop(), cfg.kbcs(),
                      cfg["workers"])
    _write_eval(run, res)
    log.info("%s: brier=%.4f ece=%.4f pg=%.3f", res.variant, res.metrics.brier, res.metrics.ece,
             res.metrics.pg_rate)


def cmd_intervene(run: Run, args) -> None:
    cfg = run.cfg
    report = ev.intervene(_dataset(cfg), _policy(cfg), cfg["variant"], cfg["seed"], cfg.loop(), cfg.kbcs(),
                          cfg["workers"], placebo=cfg["eval.placebo"])
    run.write_json("intervention.json", report.to_dict())


def cmd_occlusion(run: Run, args) -> None:
    cfg = run.cfg
    report = ev.occlusion_drop(_dataset(cfg), cfg.kbcs(), cfg["eval.roi_source"], cfg["eval.n_random"],
                               cfg["seed"])
    run.write_json("occlusion.json", report.to_dict())


def cmd_sweep_gate(run: Run, args) -> None:
    cfg = run.cfg
    rows = ev.sweep_gate(_dataset(cfg), _policy(cfg), cfg["sweep.taus"], cfg["seed"], cfg.loop(), cfg.kbcs(),
                         cfg["workers"])
    run.write_text("sweep_gate.csv", rows_csv(rows))


def cmd_sweep_steps(run: Run, args) -> None:
    cfg = run.cfg
    rows = ev.sweep_steps(_dataset(cfg), _policy(cfg), cfg["sweep.t_max_list"], cfg["seed"], cfg["variant"],
                          cfg.loop(), cfg.kbcs(), cfg["workers"])
    run.write_text("sweep_steps.csv", rows_csv(rows))


def cmd_overlay(run: Run, args) -> None:
    cfg = run.cfg
    cases, policy = _dataset(cfg), _policy(cfg)
    temps = cfg.overlay_temperatures()
    held_out = cases
    if not temps:
        n = cfg["overlay.calib_split"]
        if not 0 < n < len(cases):
            raise ConfigError(f"'overlay.calib_split' must lie in (0, {len(cases)}), got {n}")
        calib, held_out = cases[:n], cases[n:]
        temps = ev.fit_overlay(calib, policy, cfg["variant"], cfg["seed"], cfg.loop(), cfg.kbcs(),
                               cfg["workers"])
    before, after, res = ev.overlay_eval(held_out, policy, cfg["variant"], temps, cfg["seed"], cfg.loop(),
                                         cfg.kbcs(), cfg["workers"])
    timing = cfg["timing"]
    run.write_json("overlay.json", {
        "variant": res.variant,
        "temperatures": temps,
        "n_held_out": len(held_out),
        "before": before.to_dict(timing),
        "after": after.to_dict(timing),
    })


def cmd_report(run: Run, args) -> None:
    entries, series = [], []
    for path in args.metrics:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"metrics file not found: {p}")
        blob = json.loads(p.read_text())
        name = blob.get("variant", p.parent.name)
        label = f"{name} ({p.parent.name})" if any(name == e[0] for e in entries) else name
        entries.append((label, blob["metrics"]))
        series.append((label, blob["bins"]))
    baseline = None
    if args.baseline:
        bp = Path(args.baseline)
        if not bp.is_file():
            raise ConfigError(f"baseline metrics file not found: {bp}")
        baseline = json.loads(bp.read_text())["bins"]
    run.write_text("summary.txt", summary_table(entries))
    for i, (label, bins) in enumerate(series):
        slug = "".join(ch if ch.isalnum() else "_" for ch in label).strip("_").lower()
        run.write_text(f"reliability_{i:02d}_{slug}.svg", reliability_svg([(label, bins)], baseline, label))


HANDLERS = {
    "gen-data": cmd_gen_data, "calibrate": cmd_calibrate, "train": cmd_train, "eval": cmd_eval,
    "intervene": cmd_intervene, "occlusion": cmd_occlusion, "sweep-gate": cmd_sweep_gate,
    "sweep-steps": cmd_sweep_steps, "overlay": cmd_overlay, "report": cmd_report,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.out_dir is not None:
            cfg.set("paths.out_dir", args.out_dir)
        elif args.command in ("gen-data", "train"):
            cfg.set("paths.out_dir", str(Path(args.out).parent))
        run = Run(args.command, cfg, Path(cfg["paths.out_dir"]))
        HANDLERS[args.command](run, args)
        run.finish()
    except (ConfigError, ContractError, DatasetFormatError, DegenerateFitError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
