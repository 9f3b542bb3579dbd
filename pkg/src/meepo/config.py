"""Line-oriented ``key = value`` configuration files.

Model keys are written bare (``encoder_depths = 2,2,6,2``), SSM keys with an
``ssm.`` prefix and training keys with a ``train.`` prefix. ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .ssm import SSMConfig
from .train import TrainConfig


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _parse_value(raw: str, annotation: str, key: str):
    raw = raw.strip()
    ann = annotation.replace(" ", "")
    try:
        if ann.startswith("tuple") or ann.startswith("list"):
            inner = "str" if "str" in ann else ("float" if "float" in ann else "int")
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_parse_value(s, inner, key) for s in items)
        if raw.lower() == "none" and "None" in ann:
            return None
        if ann.startswith("bool"):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ann.startswith("int"):
            return int(raw)
        if ann.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {annotation}") from None


def _hint_names(cls) -> dict[str, str]:
    return {k: v.__name__ if isinstance(v, type) and typing.get_origin(v) is None else str(v)
            for k, v in typing.get_type_hints(cls).items()}


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def format_config(model: ModelConfig | None = None, train: TrainConfig | None = None) -> str:
    lines = []
    if model is not None:
        for name, f in _fields(ModelConfig).items():
            if name == "ssm":
                continue
            lines.append(f"{name} = {_format_value(getattr(model, name))}")
        for name in _fields(SSMConfig):
            lines.append(f"ssm.{name} = {_format_value(getattr(model.ssm, name))}")
    if train is not None:
        for name in _fields(TrainConfig):
            lines.append(f"train.{name} = {_format_value(getattr(train, name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, model: ModelConfig | None = None,
                 train: TrainConfig | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Apply ``key = value`` lines on top of ``model``/``train`` (defaults when omitted).

    Unknown keys raise :class:`ConfigError`.
    """
    model_kw, ssm_kw, train_kw = {}, {}, {}
    mf, sf, tf = _fields(ModelConfig), _fields(SSMConfig), _fields(TrainConfig)
    hints = {
        "model": _hint_names(ModelConfig),
        "ssm": _hint_names(SSMConfig),
        "train": _hint_names(TrainConfig),
    }
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith("ssm."):
            name = key[4:]
            if name not in sf:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            ssm_kw[name] = _parse_value(raw, hints["ssm"][name], key)
        elif key.startswith("train."):
            name = key[6:]
            if name not in tf:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            train_kw[name] = _parse_value(raw, hints["train"][name], key)
        else:
            if key not in mf or key == "ssm":
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            model_kw[key] = _parse_value(raw, hints["model"][key], key)
    model = model or ModelConfig()
    train = train or TrainConfig()
    try:
        ssm = dataclasses.replace(model.ssm, **ssm_kw)
        model = dataclasses.replace(model, ssm=ssm, **model_kw)
        train = dataclasses.replace(train, **train_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return model, train


def load_config(path, model: ModelConfig | None = None, train: TrainConfig | None = None):
    return parse_config(Path(path).read_text(), model, train)
