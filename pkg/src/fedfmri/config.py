"""Experiment configuration: YAML file -> typed dataclasses, with line-numbered errors.

Schema (every key optional; missing keys keep their defaults)::

    data:
      source: synth            # synth | csv
      series_dir: path         # csv only: one <subject_id>.csv per subject
      phenotype: path          # csv only: subject_id,site_id,label
      roi_names: path          # optional atlas labels for biomarker CSVs
      window: 32
      stride: 1
      synth: {n_sites, subjects_per_class, n_rois, n_frames, shift_strength,
              signal_strength, informative_roi_count, subject_noise, site_shift, seed}
    strategies: [single, mix, fed]
    fed: {epochs, steps_per_epoch, tau, lr, lr_every, lr_factor, dropout, arch,
          noise: {mechanism, alpha}}
    adapt: {gate_input, gate_arch, warmup_epochs, feature_noise_alpha}
    tau_grid: [5, 10, 20, 30]
    noise_grid: [{mechanism: gaussian, alpha: 0.01}, ...]
    k_folds: 5
    seeds: [0, 1, 2]
    interpret: {strategy: fed, k: 10}
    telemetry: epoch            # epoch | step
    save_models: false          # write per-fold model checkpoints under <out>/checkpoints
    out: results

Paths are resolved relative to the config file.
"""

from __future__ import annotations

import dataclasses
import difflib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SynthConfig
from .federation import FedConfig
from .privacy import NoiseSpec
from .strategies import StrategyKind


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, source: str = "<config>", line: int | None = None, field_path: str = ""):
        self.source, self.line, self.field_path = source, line, field_path
        where = f"{source}:{line}" if line else source
        prefix = f"{where}: {field_path}: " if field_path else f"{where}: "
        super().__init__(prefix + message)


@dataclass
class DataConfig:
    source: str = "synth"
    series_dir: str = ""
    phenotype: str = ""
    roi_names: str = ""
    window: int = 32
    stride: int = 1
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class AdaptConfig:
    gate_input: str = "features"
    gate_arch: str = "gate"
    warmup_epochs: int = 5
    feature_noise_alpha: float = 0.01


@dataclass
class InterpretConfig:
    strategy: str = "fed"
    k: int = 10


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    strategies: list[str] = field(default_factory=lambda: ["fed"])
    fed: FedConfig = field(default_factory=lambda: FedConfig(noise=NoiseSpec("gaussian", 0.01)))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    tau_grid: list[int] = field(default_factory=lambda: [5, 10, 20, 30])
    noise_grid: list[NoiseSpec] = field(default_factory=lambda: [
        NoiseSpec(m, a) for m in ("gaussian", "laplace") for a in (0.001, 0.01, 0.1, 1.0)])
    k_folds: int = 5
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    interpret: InterpretConfig = field(default_factory=InterpretConfig)
    telemetry: str = "epoch"
    save_models: bool = False
    out: str = "results"
    base_dir: str = "."  # directory of the config file; not read from YAML

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


# ---------------------------------------------------------------- YAML -> dataclass


def _line_map(node, path=(), out=None) -> dict[tuple, int]:
    """Map key paths to 1-based source lines using the composed YAML node tree."""
    out = {} if out is None else out
    if node is None:
        return out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = (*path, k.value)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, (*path, i), out)
    return out


class _Builder:
    def __init__(self, source: str, lines: dict[tuple, int]):
        self.source = source
        self.lines = lines

    def fail(self, msg, path):
        line = None
        for n in range(len(path), -1, -1):
            if path[:n] in self.lines:
                line = self.lines[path[:n]]
                break
        raise ConfigError(msg, self.source, line, ".".join(map(str, path)))

    def build(self, cls, raw, path, base=None):
        """Dataclass from a mapping; keys missing from ``raw`` keep ``base``'s values."""
        if raw is None:
            return base if base is not None else cls()
        if not isinstance(raw, dict):
            self.fail(f"expected a mapping, got {type(raw).__name__}", path)
        hints = typing.get_type_hints(cls)
        names = [f.name for f in dataclasses.fields(cls) if f.name != "base_dir"]
        kwargs = {}
        for key, value in raw.items():
            if key not in names:
                close = difflib.get_close_matches(str(key), names, n=1)
                hint = f" (did you mean {close[0]!r}?)" if close else ""
                self.fail(f"unknown field{hint}", (*path, key))
            default = getattr(base, key) if base is not None else None
            kwargs[key] = self.convert(hints[key], value, (*path, key), default)
        try:
            return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
        except (ValueError, TypeError) as exc:
            self.fail(str(exc), path)

    def convert(self, tp, value, path, default=None):
        origin = typing.get_origin(tp)
        if dataclasses.is_dataclass(tp):
            return self.build(tp, value, path, default if dataclasses.is_dataclass(default) else None)
        if origin in (typing.Union, types.UnionType):
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            return None if value is None else self.convert(args[0], value, path)
        if origin is list:
            if not isinstance(value, list):
                self.fail(f"expected a list, got {type(value).__name__}", path)
            (inner,) = typing.get_args(tp)
            return [self.convert(inner, v, (*path, i)) for i, v in enumerate(value)]
        if origin is dict:
            if not isinstance(value, dict):
                self.fail(f"expected a mapping, got {type(value).__name__}", path)
            kt, vt = typing.get_args(tp)
            out = {}
            for k, v in value.items():
                if kt is int and isinstance(k, str) and k.lstrip("-").isdigit():
                    k = int(k)  # JSON object keys are always strings
                out[self.convert(kt, k, (*path, k))] = self.convert(vt, v, (*path, k))
            return out
        if tp is bool:
            if not isinstance(value, bool):
                self.fail(f"expected true/false, got {value!r}", path)
            return value
        if tp is int:
            if isinstance(value, bool) or not isinstance(value, int):
                self.fail(f"expected an integer, got {value!r}", path)
            return value
        if tp is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                self.fail(f"expected a number, got {value!r}", path)
            return float(value)
        if tp is str:
            if not isinstance(value, (str, int, float)) or isinstance(value, bool):
                self.fail(f"expected a string, got {value!r}", path)
            return str(value)
        return value


def parse_config(text: str, source: str = "<config>", base_dir: str = ".") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", source,
                          mark.line + 1 if mark else None) from None
    builder = _Builder(source, _line_map(node))
    cfg = builder.build(ExperimentConfig, raw or {}, (), ExperimentConfig())
    cfg.base_dir = base_dir
    validate(cfg, builder)
    return cfg


def from_dict(raw: dict, base_dir: str = ".") -> ExperimentConfig:
    """Config from an already-parsed mapping (e.g. ``dataclasses.asdict`` output)."""
    raw = {k: v for k, v in raw.items() if k != "base_dir"}
    builder = _Builder("<dict>", {})
    cfg = builder.build(ExperimentConfig, raw, (), ExperimentConfig())
    cfg.base_dir = base_dir
    validate(cfg, builder)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path), str(path.parent))


def validate(cfg: ExperimentConfig, builder: _Builder | None = None):
    fail = (builder or _Builder("<config>", {})).fail
    if not cfg.strategies:
        fail("strategy list is empty", ("strategies",))
    for i, s in enumerate(cfg.strategies):
        try:
            StrategyKind.parse(s)
        except ValueError as exc:
            fail(str(exc), ("strategies", i))
    if not cfg.seeds:
        fail("seed list is empty", ("seeds",))
    if len(set(cfg.seeds)) != len(cfg.seeds):
        fail("duplicate seeds", ("seeds",))
    if cfg.k_folds < 2:
        fail("need at least 2 folds", ("k_folds",))
    if cfg.data.source not in ("synth", "csv"):
        fail("source must be 'synth' or 'csv'", ("data", "source"))
    if cfg.data.source == "csv" and not (cfg.data.series_dir and cfg.data.phenotype):
        fail("csv source needs series_dir and phenotype", ("data",))
    if cfg.telemetry not in ("epoch", "step"):
        fail("telemetry must be 'epoch' or 'step'", ("telemetry",))
    if cfg.adapt.gate_input not in ("features", "outputs"):
        fail("gate_input must be 'features' or 'outputs'", ("adapt", "gate_input"))
    if any(t < 1 for t in cfg.tau_grid):
        fail("tau values must be >= 1", ("tau_grid",))
