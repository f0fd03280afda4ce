"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment. Every key has a typed
default below; unknown keys are rejected. The resolved configuration is
echoed verbatim into each run's output directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from .belief import CalibrationParams, FusionConfig
from .environment import GenSpec
from .errors import ConfigError
from .kbcs import KbcsConfig, ProxyConfig
from .loop import PREVALENCE, LoopConfig
from .rl import TrainConfig

OVERLAY_PREFIX = "overlay.temperature."
# execution knobs that never change results; left out of the echoed config
EXECUTION_ONLY = ("workers",)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _names(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _p0(s: str) -> float | str:
    s = s.strip()
    return PREVALENCE if s == PREVALENCE else float(s)


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (int, 0),
    "workers": (int, 1),
    "timing": (_bool, False),
    "variant": (str, "Prior-Mix"),
    "paths.data": (str, ""),
    "paths.policy": (str, ""),
    "paths.out_dir": (str, "."),
    "gen.n": (int, 500),
    "gen.start": (int, 0),
    "gen.width": (int, 32),
    "gen.height": (int, 32),
    "gen.noise": (float, 1.0),
    "gen.amplitude": (float, 1.5),
    "gen.roi_size": (int, 4),
    "gen.pos_rate": (float, 0.5),
    "gen.peaks": (int, 1),
    "gen.prior_info": (float, 3.0),
    "gen.concepts": (_names, ("finding",)),
    "gen.domain_tag": (str, "source"),
    "kbcs.backend": (str, "fallback"),
    "kbcs.window": (int, 4),
    "kbcs.score_scale": (float, 1.0),
    "kbcs.calibration": (str, ""),
    "kbcs.primary_concepts": (_names, ()),
    "fusion.alpha": (float, 0.5),
    "fusion.gate_threshold": (float, 0.1),
    "fusion.gamma": (float, 2.0),
    "fusion.epsilon": (float, 1e-6),
    "loop.t_max": (int, 3),
    "loop.p0": (_p0, 0.5),
    "policy.bins": (int, 10),
    "train.K": (int, 4),
    "train.c_clip": (float, 2.0),
    "train.eta": (float, 0.01),
    "train.beta_kl": (float, 0.1),
    "train.learning_rate": (float, 0.1),
    "train.batch_size": (int, 16),
    "train.sync_period": (int, 10),
    "train.steps": (int, 300),
    "proxy.informativeness": (float, 3.0),
    "eval.n_random": (int, 20),
    "eval.roi_source": (str, "gt"),
    "eval.placebo": (_bool, False),
    "eval.svg": (_bool, True),
    "sweep.taus": (_floats, (0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)),
    "sweep.t_max_list": (_ints, (1, 2, 3, 4)),
    "overlay.calib_split": (int, 100),
}


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        key = key.strip()
        if key.startswith(OVERLAY_PREFIX) and len(key) > len(OVERLAY_PREFIX):
            parser: Callable[[str], Any] = float
        elif key in SCHEMA:
            parser = SCHEMA[key][0]
        else:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            self.values[key] = parser(raw.strip()) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key!r}: {exc}") from exc

    def update(self, pairs: Mapping[str, Any]) -> None:
        for k, v in pairs.items():
            if v is None:
                continue
            self.set(k, v if isinstance(v, str) else _fmt(v))

    def overlay_temperatures(self) -> dict[str, float]:
        return {k[len(OVERLAY_PREFIX):]: v for k, v in self.values.items() if k.startswith(OVERLAY_PREFIX)}

    def render(self) -> str:
        keys = sorted(k for k in self.values if k not in EXECUTION_ONLY)
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in keys)

    # -- typed views; dataclass validation errors name the offending key --

    def gen_spec(self) -> GenSpec:
        v = self.values
        return GenSpec(v["gen.width"], v["gen.height"], v["gen.noise"], v["gen.amplitude"], v["gen.roi_size"],
                       v["gen.pos_rate"], v["gen.peaks"], v["gen.prior_info"], v["seed"], v["gen.concepts"],
                       v["gen.domain_tag"])

    def fusion(self) -> FusionConfig:
        v = self.values
        return FusionConfig(v["fusion.alpha"], v["fusion.gate_threshold"], v["fusion.gamma"], v["fusion.epsilon"])

    def loop(self) -> LoopConfig:
        return LoopConfig(t_max=self.values["loop.t_max"], fusion=self.fusion(), p0=self.values["loop.p0"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.K"], v["train.c_clip"], v["train.eta"], v["train.beta_kl"],
                           v["train.learning_rate"], v["train.batch_size"], v["train.sync_period"],
                           v["train.steps"], v["seed"])

    def proxy(self) -> ProxyConfig:
        return ProxyConfig(self.values["proxy.informativeness"])

    def kbcs(self, calibrations: Mapping[str, CalibrationParams] | None = None) -> KbcsConfig:
        v = self.values
        if calibrations is None:
            calibrations = load_calibrations(v["kbcs.calibration"]) if v["kbcs.calibration"] else {}
        return KbcsConfig(v["kbcs.backend"], v["kbcs.window"], v["kbcs.score_scale"], dict(calibrations),
                          v["kbcs.primary_concepts"] or None)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value'")
        k, val = line.split("=", 1)
        out[k.strip()] = val.strip()
    return out


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig.defaults()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        for k, v in parse_config_text(p.read_text(), str(p)).items():
            cfg.set(k, v)
    return cfg


def save_calibrations(calibrations: Mapping[str, CalibrationParams], path: str | Path) -> None:
    data = [calibrations[k].to_dict() for k in sorted(calibrations)]
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def load_calibrations(path: str | Path) -> dict[str, CalibrationParams]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"calibration file not found: {p}")
    data = json.loads(p.read_text())
    if isinstance(data, dict):
        data = [data]
    return {d["concept"]: CalibrationParams.from_dict(d) for d in data}
