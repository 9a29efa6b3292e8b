"""Experiment configuration.

Config files use the INI grammar read by :mod:`configparser`: ``[section]``
headers, ``key = value`` lines and ``#`` comments.  Lists are comma
separated.  Any key can be overridden from the command line as
``section.key=value``.

Sections and keys::

    [experiment]  kind, seeds, dims, ns, threshold, data, center,
                  posterior_samples, interventions, intervention_range,
                  intervention_samples, threads, reproducible, out
    [graph]       avg_degree, weight_low, weight_high, noise,
                  noise_scale_low, noise_scale_high, sigma
    [prior]       weight, rho, laplace_scale, nu, log_sigma_std
    [train]       every field of TrainConfig except seed and equal_variance
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from dagvi.trainer import TrainConfig

KINDS = ("synthetic-ev", "synthetic-nv", "intervention", "ablation", "fit-external")
ABLATIONS = ("full", "mean-field", "laplace", "sinkhorn-100")
OUT_ENV = "DAGVI_OUTPUT_DIR"


def default_out() -> str:
    return os.environ.get(OUT_ENV, "dagvi-out")


@dataclass(frozen=True)
class GraphConfig:
    avg_degree: float = 1.0
    weight_low: float = 0.5
    weight_high: float = 2.0
    noise: str = "gaussian"
    noise_scale_low: float = 0.5
    noise_scale_high: float = 2.0
    sigma: float = 1.0


@dataclass(frozen=True)
class PriorConfig:
    weight: str = "horseshoe"
    rho: float = 2.0
    laplace_scale: float = 0.5
    nu: float = 1.0
    log_sigma_std: float = 10.0

    def __post_init__(self):
        if self.weight not in ("horseshoe", "laplace", "gaussian-marginal"):
            raise ValueError(f"unknown prior {self.weight!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "synthetic-ev"
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    dims: Tuple[int, ...] = (8,)
    ns: Tuple[int, ...] = (100,)
    threshold: float = 0.3
    data: Optional[str] = None
    center: bool = True
    posterior_samples: int = 100
    interventions: int = 5
    intervention_range: float = 2.0
    intervention_samples: int = 1000
    threads: int = 1
    reproducible: bool = False
    out: str = field(default_factory=default_out)
    graph: GraphConfig = GraphConfig()
    prior: PriorConfig = PriorConfig()
    train: TrainConfig = TrainConfig()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.kind == "fit-external":
            if self.data is None:
                raise ValueError("fit-external needs [experiment] data = PATH")
            if not Path(self.data).is_file():
                raise FileNotFoundError(f"data file not found: {self.data}")
        if self.threshold < 0 or self.threads < 1 or self.posterior_samples < 1:
            raise ValueError("threshold >= 0, threads >= 1 and posterior_samples >= 1 required")

    @property
    def equal_variance(self) -> bool:
        return self.kind != "synthetic-nv"

    def config_hash(self) -> str:
        """Digest of every knob that can change a metric value."""
        payload = asdict(self)
        for key in ("seeds", "out", "threads", "reproducible"):
            payload.pop(key)
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTION_TYPES = {"graph": GraphConfig, "prior": PriorConfig, "train": TrainConfig}


def _convert(value: str, current):
    value = value.strip()
    if isinstance(current, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, tuple):
        items = [v.strip() for v in value.split(",") if v.strip()]
        kind = type(current[0]) if current else int
        return tuple(kind(v) for v in items)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _apply(values: Dict[str, Dict[str, str]], base: ExperimentConfig) -> ExperimentConfig:
    top = {}
    defaults = {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}
    for key, raw in values.get("experiment", {}).items():
        if key not in defaults or key in _SECTION_TYPES:
            raise KeyError(f"unknown key experiment.{key}")
        current = defaults[key]
        top[key] = raw.strip() if current is None else _convert(raw, current)
    for section, cls in _SECTION_TYPES.items():
        sub = getattr(base, section)
        known = {f.name: getattr(sub, f.name) for f in fields(cls)}
        changes = {}
        for key, raw in values.get(section, {}).items():
            if key not in known or (section == "train" and key in ("seed", "equal_variance")):
                raise KeyError(f"unknown key {section}.{key}")
            changes[key] = _convert(raw, known[key])
        if changes:
            top[section] = replace(sub, **changes)
    unknown = set(values) - {"experiment", *_SECTION_TYPES}
    if unknown:
        raise KeyError(f"unknown config sections: {sorted(unknown)}")
    return replace(base, **top)


def parse_overrides(items: Iterable[str]) -> Dict[str, Dict[str, str]]:
    out: Dict[str, Dict[str, str]] = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def load_config(path=None, overrides: Iterable[str] = (), **direct) -> ExperimentConfig:
    """Build a config from an optional file, ``section.key=value`` overrides
    and keyword overrides of ``[experiment]`` keys (applied last)."""
    values: Dict[str, Dict[str, str]] = {}
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.read(path)
        values = {s: dict(parser.items(s)) for s in parser.sections()}
    for section, items in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(items)

    config = _apply(values, ExperimentConfig())
    direct = {k: v for k, v in direct.items() if v is not None}
    if "seeds" in direct:
        direct["seeds"] = tuple(direct["seeds"])
    return replace(config, **direct)


def dump_config(config: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser()
    top = asdict(config)
    sections = {name: top.pop(name) for name in _SECTION_TYPES}
    parser["experiment"] = {k: _format(v) for k, v in top.items() if v is not None}
    for name, values in sections.items():
        if name == "train":
            values = {k: v for k, v in values.items() if k not in ("seed", "equal_variance")}
        parser[name] = {k: _format(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)
