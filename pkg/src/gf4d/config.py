"""Line-oriented ``key = value`` config files.

A file may hold ``[scene]``, ``[train]`` and ``[regenerate]`` sections; keys
above the first header belong to the section the caller names as default.
Values are coerced to the type of the matching dataclass default, and an
unknown key is an error that names it.
"""

from __future__ import annotations

import configparser
import dataclasses

from .errors import InvalidArgument
from .synth import SceneSpec
from .tokenflow import GenerationConfig
from .trainer import TrainConfig

SECTIONS = {"scene": SceneSpec, "train": TrainConfig, "regenerate": GenerationConfig}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_TOP = "\x00top"


def _scalar(text, like, key):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
    except ValueError:
        raise InvalidArgument(f"config key '{key}': cannot read {text!r} as {type(like).__name__}") from None
    return text


def coerce(cls, raw, section=None):
    """Instantiate dataclass ``cls`` from a mapping of strings (or already typed values)."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            where = f" in [{section}]" if section else ""
            raise InvalidArgument(f"unknown config key '{key}'{where}")
        like = getattr(defaults, key)
        if not isinstance(value, str):
            kwargs[key] = value
        elif isinstance(like, tuple):
            elem = like[0] if like else 0.0
            parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
            kwargs[key] = tuple(_scalar(p, elem, key) for p in parts)
        else:
            kwargs[key] = _scalar(value, like, key)
    return cls(**kwargs)


def read_sections(text, default_section):
    """Raw ``{section: {key: value}}`` from config text."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_TOP}]\n" + text)
    except configparser.Error as exc:
        raise InvalidArgument(f"malformed config: {exc}") from None
    out = {}
    for name in parser.sections():
        if name != _TOP and name not in SECTIONS:
            raise InvalidArgument(f"unknown config section [{name}]")
        if name != _TOP:
            out[name] = dict(parser[name])
    top = dict(parser[_TOP])
    if top:
        out[default_section] = {**top, **out.get(default_section, {})}
    return out


def parse_overrides(items):
    """``["key=value", ...]`` to a dict; a bare key is an error."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise InvalidArgument(f"override {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def load(path, section, overrides=None, primary=None):
    """Build the dataclass for ``section``: defaults, then file, then overrides.

    Keys above the first header belong to ``primary`` (default: ``section``).
    """
    raw = {}
    if path is not None:
        with open(path) as f:
            raw = read_sections(f.read(), primary or section).get(section, {})
    raw.update(overrides or {})
    return coerce(SECTIONS[section], raw, section)


def dump(obj):
    """``key = value`` lines for every field, in declaration order."""
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return lines
