"""Declarative run configuration: nested dataclasses read from and written to YAML.

Every field can be overridden with a dotted ``key=value`` string, for example
``optimizer.lr=0.01`` or ``synthesis.alpha.start=50``.
"""
from __future__ import annotations

import copy
import dataclasses
import os
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal

import yaml

from .core import AlphaSchedule
from .errors import ConfigParseError
from .model import ClassifierConfig, OptimizerConfig
from .postprocess import POSTPROCESSORS, OdinConfig
from .synthesis import SynthesisConfig

OUTPUT_ROOT_ENV = "VOOD_OUTPUT_ROOT"


@dataclass
class DataConfig:
    """Where the splits come from.

    With ``benchmark`` set, a bare entry is a split name inside that benchmark
    directory. Entries containing ``/`` or ``:`` are used as given (image
    folders, or ``bench_dir:split``).
    """

    benchmark: str | None = None
    train: str = "train"
    val_id: str | None = "val_id"
    test_id: str = "test_id"
    ood: dict[str, str] = field(default_factory=lambda: {
        "spurious_ood": "spurious_ood", "conventional_ood": "conventional_ood"})
    # validation OOD set for ODIN tuning; None disables tuning
    val_ood: str | None = None
    image_size: int | None = None
    hflip: bool = False

    def ref(self, entry: str) -> str:
        if not self.benchmark or "/" in entry or ":" in entry:
            return entry
        return f"{self.benchmark}:{entry}"


@dataclass
class RunConfig:
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    lam: float = 1.0
    kl_direction: Literal["u||p", "p||u"] = "u||p"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    postprocessors: list[str] = field(default_factory=lambda: ["msp", "energy", "odin", "iodin"])
    odin: OdinConfig = field(default_factory=OdinConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.kl_direction not in ("u||p", "p||u"):
            raise ValueError(f"unknown KL direction {self.kl_direction!r}")
        unknown = [p for p in self.postprocessors if p not in POSTPROCESSORS]
        if unknown:
            raise ValueError(f"unknown postprocessors {unknown}; known: {POSTPROCESSORS}")

    def output_dir(self) -> Path:
        """``out_dir``, resolved under $VOOD_OUTPUT_ROOT when relative."""
        out = Path(self.out_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return out if out.is_absolute() or not root else Path(root) / out


# Reference per-benchmark settings, for auditing and as starting points.
PRESETS: dict[str, dict] = {
    "waterbirds": {"lam": 0.1, "synthesis": {"method": "grad_add", "p_inv": 10.0,
                                             "alpha": {"start": 300.0, "end": 30.0}}},
    "celeba": {"lam": 1.0, "synthesis": {"method": "gaussian_noise", "p_inv": 5.0, "noise_scale": 0.1}},
    "car": {"lam": 1.0, "synthesis": {"method": "grad_add", "p_inv": 10.0, "alpha": 0.1}},
    "aircraft": {"lam": 1.0, "synthesis": {"method": "grad_add", "p_inv": 10.0, "alpha": 0.1}},
    "cifar10": {"lam": 1.0, "synthesis": {"method": "random_shuffle", "p_inv": 20.0}},
    "cifar100": {"lam": 5.0, "synthesis": {"method": "invariant_shuffle", "p_inv": 10.0}},
    "imagenet100": {"lam": 1.0, "synthesis": {"method": "grad_add", "p_inv": 10.0, "alpha": 10.0}},
}


# ---- parsing ---------------------------------------------------------------

def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value: Any, tp, where: str) -> Any:
    """Check ``value`` against annotation ``tp``; ints widen to float."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, where)
            except ConfigParseError:
                pass
        raise ConfigParseError(where, f"value {value!r} matches none of {tp}")
    if origin is Literal:
        if value not in typing.get_args(tp):
            raise ConfigParseError(where, f"{value!r} is not one of {typing.get_args(tp)}")
        return value
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigParseError(where, f"expected a list, got {value!r}")
        (item,) = typing.get_args(tp)[:1] or (Any,)
        out = [_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(out) if origin is tuple else out
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigParseError(where, f"expected a mapping, got {value!r}")
        _, vt = typing.get_args(tp)
        return {str(k): _coerce(v, vt, f"{where}.{k}") for k, v in value.items()}
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigParseError(where, f"expected true/false, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigParseError(where, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigParseError(where, f"expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigParseError(where, f"expected a string, got {value!r}")
        return value
    if tp is AlphaSchedule:
        return value
    raise ConfigParseError(where, f"unsupported annotation {tp}")


def _alpha_from(value: Any, where: str, default_steps: int) -> AlphaSchedule:
    """A bare number is a constant schedule; a mapping is linear unless ``mode`` says otherwise."""
    if isinstance(value, AlphaSchedule):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return AlphaSchedule.constant(float(value))
    if not isinstance(value, dict):
        raise ConfigParseError(where, f"expected a number or a mapping, got {value!r}")
    unknown = set(value) - {"start", "end", "total_steps", "mode"}
    if unknown:
        raise ConfigParseError(f"{where}.{sorted(unknown)[0]}", "unknown field")
    if "start" not in value:
        raise ConfigParseError(f"{where}.start", "missing")
    mode = value.get("mode", "linear" if "end" in value else "constant")
    kw = {"start": _coerce(value["start"], float, f"{where}.start"),
          "end": _coerce(value.get("end"), float | None, f"{where}.end"),
          "total_steps": _coerce(value.get("total_steps", default_steps), int, f"{where}.total_steps"),
          "mode": mode}
    if mode == "constant" and kw["end"] is None:
        kw["end"] = kw["start"]
    try:
        return AlphaSchedule(**kw)
    except ValueError as e:
        raise ConfigParseError(f"{where}.mode" if "mode" in str(e) else where, str(e)) from e


def _build(cls, data: Any, where: str, **extra):
    """Instantiate dataclass ``cls`` from a mapping, naming the bad field on failure."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigParseError(where, f"expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in names:
            raise ConfigParseError(path, "unknown field")
        tp = hints[key]
        if key in extra:
            kwargs[key] = extra[key](value, path)
        elif _is_dataclass_type(tp):
            kwargs[key] = _build(tp, value, path)
        else:
            kwargs[key] = _coerce(value, tp, path)
        # validate one field at a time so the error names the field that caused it
        try:
            cls(**{key: kwargs[key]})
        except (ValueError, TypeError) as e:
            raise ConfigParseError(path, str(e)) from e
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigParseError(where or "config", str(e)) from e


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigParseError("config", "top level must be a mapping")
    d = dict(d)
    if "lambda" in d:
        d["lam"] = d.pop("lambda")
    preset = d.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigParseError("preset", f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        d = _merge(PRESETS[preset], d)
    epochs = d.get("optimizer", {}).get("epochs", OptimizerConfig().epochs) \
        if isinstance(d.get("optimizer", {}), dict) else OptimizerConfig().epochs

    def alpha(v, path):
        return _alpha_from(v, path, default_steps=epochs)

    def synth(v, path):
        out = _build(SynthesisConfig, v, path, alpha=alpha)
        raw_alpha = v.get("alpha") if isinstance(v, dict) else None
        if (out.alpha_granularity == "step" and out.alpha.mode == "linear"
                and not (isinstance(raw_alpha, dict) and "total_steps" in raw_alpha)):
            raise ConfigParseError(f"{path}.alpha.total_steps",
                                   "required for a linear schedule indexed by step")
        return out

    return _build(RunConfig, d, "", synthesis=synth)


def config_to_dict(cfg: RunConfig) -> dict:
    return {("lambda" if k == "lam" else k): v for k, v in asdict(cfg).items()}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings to a raw config mapping; values are YAML scalars."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigParseError(item, "override must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if parts[0] == "lam":
            parts[0] = "lambda"
        node = d
        for p in parts[:-1]:
            if p == "alpha" and isinstance(node.get(p), (int, float)):
                node[p] = {"start": node[p]}
            elif not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[parts[-1]] = yaml.safe_load(raw)
    return d


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigParseError(str(path), f"invalid YAML: {e}") from e
        except OSError as e:
            raise ConfigParseError(str(path), f"cannot read config: {e}") from e
    return config_from_dict(apply_overrides(raw, overrides or []))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path
