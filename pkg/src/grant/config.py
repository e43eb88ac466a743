"""Flat ``key = value`` run configuration with presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Iterable

from .flexgcn import LayerSpec
from .synth import SynthConfig
from .teaching import SelectionPolicy
from .trainer import ConfigError, TrainerConfig


@dataclass
class RunConfig:
    # synthetic data
    graphon: str = "gradient"
    graphon_p: float = 0.3
    sbm_p_in: float = 0.5
    sbm_p_out: float = 0.1
    sbm_split: float = 0.5
    resolution: int = 1000
    nodes_mean: int = 100
    num_graphs: int = 50000
    feature_dim: int = 40
    task: str = "reg"
    target_level: str = "node"
    teacher_hidden: int = 16
    teacher_kappas: tuple[int, ...] = (2, 2)
    teacher_seed: int = 1
    teacher_scale: float = 1.0
    normalize_teacher: bool = True
    cls_percentile: float = 80.0
    split: tuple[int, ...] = (30000, 10000, 10000)
    # data location
    data_dir: str = "data"
    train_path: str = ""
    val_path: str = ""
    # model
    hidden: tuple[int, ...] = (16,)
    kappas: tuple[int, ...] = (3, 2)
    init_scale: float = 1.0
    # training
    lr: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    stop_epsilon: float = 0.0
    loss: str = "auto"
    plateau: bool = False
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_min_lr: float = 1e-6
    restart_on_selection: bool = True
    max_interval: int = 0
    checkpoint_every: int = 0
    seed: int = 0
    # selection
    policy: str = "none"
    start_ratio: float = 1.0
    # runtime
    threads: int = 0
    out_dir: str = "runs/latest"

    # --- conversions ---

    def synth_config(self) -> SynthConfig:
        names = {f.name for f in fields(SynthConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kw["split"] = tuple(self.split)
        cfg = SynthConfig(**kw)
        cfg.validate()
        return cfg

    def trainer_config(self, loss: str) -> TrainerConfig:
        names = {f.name for f in fields(TrainerConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kw["loss"] = loss
        cfg = TrainerConfig(**kw)
        cfg.validate()
        return cfg

    def layer_spec(self, d: int, c: int, node_level: bool) -> LayerSpec:
        n_hidden = len(self.kappas) - 1
        hidden = tuple(self.hidden)
        if len(hidden) == 1 and n_hidden > 1:
            hidden = hidden * n_hidden
        if len(hidden) != n_hidden:
            raise ConfigError(f"hidden has {len(hidden)} widths but kappas {self.kappas} needs {n_hidden}")
        return LayerSpec((d, *hidden, c), tuple(self.kappas), "none" if node_level else "sum")

    def selection_policy(self, node_level: bool) -> SelectionPolicy:
        try:
            return SelectionPolicy(self.policy, self.start_ratio, "node" if node_level else "graph")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    default = getattr(RunConfig, key, None)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            raw = raw.strip("[]()")
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key}")
        values[key] = _parse_value(key, raw)
    return values


def parse_overrides(pairs: Iterable[str]) -> dict:
    return parse_lines(pairs, "<override>")


def preset_names() -> list[str]:
    root = resources.files("grant") / "presets"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_preset(name: str) -> dict:
    path = resources.files("grant") / "presets" / f"{name}.cfg"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return parse_lines(path.read_text(encoding="utf-8").splitlines(), f"preset:{name}")


def resolve(preset: str | None = None, config_path: str | Path | None = None,
            overrides: dict | None = None) -> RunConfig:
    """Defaults, then preset, then config file, then overrides."""
    values = {}
    if preset:
        values.update(load_preset(preset))
    if config_path:
        text = Path(config_path).read_text(encoding="utf-8")
        values.update(parse_lines(text.splitlines(), str(config_path)))
    if overrides:
        for key in overrides:
            if key not in _FIELDS:
                raise ConfigError(f"unknown key {key}")
        values.update(overrides)
    return RunConfig(**values)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(cfg, f.name))}\n" for f in fields(RunConfig))
