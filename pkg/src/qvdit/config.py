"""Run configuration: INI file with sections, overridable by ``section.key=value``.

Schema (every key optional, defaults shown by ``default_ini()``)::

    [run]          seed
    [model]        layers, d, spatial, frames, block, mlp_ratio
    [calibration]  w_bits, a_bits, gamma, iters, batch, lr_quant, lr_tqe,
                   freeze_m, enable_tqe, enable_tmd, use_m, loss_point, tqe_skip
    [data]         prompts, timesteps, frame_step, eval_prompts, eval_timesteps
    [layer_bits]   <layer name> = <w_bits>,<a_bits>

Bit-widths accept ``none`` for a full-precision pass-through. ``iters``
accepts ``auto`` for the bit-width default. One seed drives the model
weights, the data streams and the calibration order.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .calibration import CalibConfig
from .model import ToyDiTConfig


class ConfigError(ValueError):
    """Invalid or unreadable configuration; the message names the field."""


@dataclass(frozen=True)
class DataConfig:
    prompts: int = 10
    timesteps: int = 5
    frame_step: float = 0.3
    eval_prompts: int = 4
    eval_timesteps: int = 2

    def __post_init__(self):
        for f in ("prompts", "timesteps", "eval_prompts", "eval_timesteps"):
            if getattr(self, f) < 1:
                raise ValueError(f"data.{f} must be >= 1")
        if self.frame_step < 0:
            raise ValueError("data.frame_step must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ToyDiTConfig = field(default_factory=ToyDiTConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def snapshot(self) -> dict:
        """Plain nested dict; feeding it back through ``from_dict`` rebuilds this config."""
        calib = asdict(self.calib)
        calib["tqe_skip"] = list(calib["tqe_skip"])
        calib["layer_bits"] = {k: list(v) for k, v in sorted(calib["layer_bits"].items())}
        model = asdict(self.model)
        model.pop("seed")
        calib.pop("seed")
        return {"seed": self.seed, "model": model, "calibration": calib, "data": asdict(self.data)}


SECTIONS = {
    "model": ToyDiTConfig,
    "calibration": CalibConfig,
    "data": DataConfig,
}
_SKIP = {"seed", "layer_bits"}


def _parse_bits(text: str, where: str) -> int | None:
    t = text.strip().lower()
    if t in ("none", "fp", ""):
        return None
    try:
        return int(t)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer bit-width or 'none', got {text!r}") from None


def _parse_bool(text: str, where: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {text!r}")


def _coerce(cls, name: str, text: str, where: str):
    kind = {f.name: f.type for f in fields(cls)}[name]
    if name in ("w_bits", "a_bits"):
        return _parse_bits(text, where)
    if name == "iters":
        return None if text.strip().lower() == "auto" else _parse_int(text, where)
    if name == "tqe_skip":
        return tuple(p.strip() for p in text.split(",") if p.strip())
    if kind in ("bool", bool):
        return _parse_bool(text, where)
    if kind in ("int", int):
        return _parse_int(text, where)
    if kind in ("float", float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from None
    return text.strip()


def _parse_int(text: str, where: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {text!r}") from None


def _apply(values: dict, section: str, key: str, text: str) -> None:
    if section == "run":
        if key != "seed":
            raise ConfigError(f"run.{key}: unknown field")
        values["seed"] = _parse_int(text, "run.seed")
        return
    if section == "layer_bits":
        parts = text.split(",")
        if len(parts) != 2:
            raise ConfigError(f"layer_bits.{key}: expected '<w_bits>,<a_bits>', got {text!r}")
        where = f"layer_bits.{key}"
        values["layer_bits"][key] = (_parse_bits(parts[0], where), _parse_bits(parts[1], where))
        return
    cls = SECTIONS.get(section)
    if cls is None:
        raise ConfigError(f"unknown section [{section}]")
    names = {f.name for f in fields(cls)} - _SKIP
    if key not in names:
        raise ConfigError(f"{section}.{key}: unknown field")
    values[section][key] = _coerce(cls, key, text, f"{section}.{key}")


def _build(values: dict) -> RunConfig:
    seed = values["seed"]
    try:
        model = ToyDiTConfig(seed=seed, **values["model"])
    except (ValueError, TypeError) as e:
        raise ConfigError(f"model: {e}") from None
    try:
        calib = CalibConfig(seed=seed, layer_bits=dict(values["layer_bits"]), **values["calibration"])
    except (ValueError, TypeError) as e:
        raise ConfigError(f"calibration: {e}") from None
    try:
        data = DataConfig(**values["data"])
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    for bits in (calib.w_bits, calib.a_bits):
        if bits is not None and not 2 <= bits <= 16:
            raise ConfigError(f"calibration: bit-width must be in [2, 16], got {bits}")
    return RunConfig(seed, model, calib, data)


def _empty_values() -> dict:
    return {"seed": 0, "model": {}, "calibration": {}, "data": {}, "layer_bits": {}}


def parse_override(item: str) -> tuple[str, str, str]:
    """``section.key=value`` -> (section, key, value). Layer names may contain dots."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    lhs, value = item.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override {item!r} lacks a section (use e.g. calibration.iters=10)")
    section, key = lhs.strip().split(".", 1)
    return section, key, value.strip()


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> RunConfig:
    """Read an INI file (or defaults when ``path`` is None), then apply overrides and seed."""
    values = _empty_values()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str  # layer names are case-sensitive
        try:
            parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                _apply(values, section, key, text)
    for item in overrides or []:
        _apply(values, *parse_override(item))
    if seed is not None:
        values["seed"] = int(seed)
    return _build(values)


def from_dict(snap: dict) -> RunConfig:
    values = _empty_values()
    values["seed"] = int(snap["seed"])
    values["model"] = dict(snap["model"])
    calib = dict(snap["calibration"])
    values["layer_bits"] = {k: tuple(v) for k, v in calib.pop("layer_bits", {}).items()}
    calib["tqe_skip"] = tuple(calib.get("tqe_skip", ()))
    values["calibration"] = calib
    values["data"] = dict(snap["data"])
    return _build(values)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def to_ini(cfg: RunConfig) -> str:
    snap = cfg.snapshot()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {"seed": str(snap["seed"])}
    parser["model"] = {k: _fmt(v) for k, v in snap["model"].items()}
    calib = dict(snap["calibration"])
    layer_bits = calib.pop("layer_bits")
    if calib["iters"] is None:
        calib["iters"] = "auto"
    parser["calibration"] = {k: _fmt(v) for k, v in calib.items()}
    parser["data"] = {k: _fmt(v) for k, v in snap["data"].items()}
    if layer_bits:
        parser["layer_bits"] = {k: _fmt(v) for k, v in layer_bits.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def default_ini() -> str:
    return to_ini(RunConfig())


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return RunConfig(seed, replace(cfg.model, seed=seed), replace(cfg.calib, seed=seed), cfg.data)
