"""Strict JSON run configuration for the ``train`` command.

Unknown keys anywhere are rejected. Every default is materialized into
:meth:`RunConfig.effective`, which is echoed into each report.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from balora.data import CorruptionSpec
from balora.errors import ConfigInvalid
from balora.experiment import METHODS, DataConfig, ModelConfig
from balora.optim import OptimConfig
from balora.regularizers import RegConfig


class ConfigParseError(ConfigInvalid):
    """Malformed JSON, unknown keys, or wrongly-typed values."""


@dataclass(frozen=True)
class Paths:
    report_json: str = "report.json"
    report_csv: str = "report.csv"
    checkpoint_out: str | None = None
    data_out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    methods: tuple[str, ...] = ("LoRA", "BA-LoRA")
    task_mode: str = "NLU"
    n_seeds: int = 1
    base_seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    reg: RegConfig = field(default_factory=RegConfig)
    corruptions: tuple[CorruptionSpec, ...] = (CorruptionSpec(),)
    paths: Paths = field(default_factory=Paths)

    def effective(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["corruptions"] = [asdict(c) for c in self.corruptions]
        return d


def _section(cls, raw: Any, where: str, exclude: tuple[str, ...] = (), **preset):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigParseError(f"{where}: expected an object")
    allowed = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in allowed or key in exclude:
            raise ConfigParseError(f"{where}: unknown key {key!r}")
    kwargs = dict(preset)
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigParseError(f"{where}: {exc}") from exc


def parse_run_config(raw: Any) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigParseError("config root must be an object")
    top = {"experiment", "model", "data", "optim", "reg", "corruption", "paths", "seeds"}
    for key in raw:
        if key not in top:
            raise ConfigParseError(f"unknown top-level key {key!r}")

    exp = raw.get("experiment", {})
    if not isinstance(exp, dict):
        raise ConfigParseError("experiment: expected an object")
    for key in exp:
        if key not in ("methods", "task_mode"):
            raise ConfigParseError(f"experiment: unknown key {key!r}")
    methods = tuple(exp.get("methods", RunConfig.methods))
    for m in methods:
        if m not in METHODS:
            raise ConfigInvalid(f"unknown method {m!r}; expected one of {METHODS}")
    task_mode = exp.get("task_mode", "NLU")
    if task_mode not in ("NLU", "NLG"):
        raise ConfigInvalid(f"unknown task_mode {task_mode!r}")

    seeds = raw.get("seeds", {})
    if not isinstance(seeds, dict) or any(k not in ("base", "n") for k in seeds):
        raise ConfigParseError("seeds: expected an object with keys 'base' and 'n'")
    base_seed = int(seeds.get("base", 0))
    n_seeds = int(seeds.get("n", 1))
    if n_seeds < 1:
        raise ConfigInvalid("seeds.n must be >= 1")

    reg_raw = dict(raw.get("reg") or {})
    if reg_raw.get("task_mode", task_mode) != task_mode:
        raise ConfigInvalid("reg.task_mode must match experiment.task_mode")
    reg_raw.pop("task_mode", None)
    reg_defaults = asdict(RegConfig.defaults(task_mode))

    corr_raw = raw.get("corruption", [{}])
    if isinstance(corr_raw, dict):
        corr_raw = [corr_raw]
    if not isinstance(corr_raw, list) or not corr_raw:
        raise ConfigParseError("corruption: expected an object or a non-empty list of objects")

    return RunConfig(
        methods=methods,
        task_mode=task_mode,
        n_seeds=n_seeds,
        base_seed=base_seed,
        model=_section(ModelConfig, raw.get("model"), "model"),
        data=_section(DataConfig, raw.get("data"), "data"),
        optim=_section(OptimConfig, raw.get("optim"), "optim", exclude=("seed",), seed=base_seed),
        reg=_section(RegConfig, reg_raw, "reg", **{k: v for k, v in reg_defaults.items() if k not in reg_raw}),
        corruptions=tuple(_section(CorruptionSpec, c, f"corruption[{i}]") for i, c in enumerate(corr_raw)),
        paths=_section(Paths, raw.get("paths"), "paths"),
    )


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(raw)
