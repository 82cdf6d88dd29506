"""Run configuration: a JSON file with nested sections (suite / distill /
run / probe / comm_audit), strict key checking, dotted-path CLI overrides,
and a stable hash embedded in every artifact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .data import SuiteConfig
from .distill import DistillConfig, DPConfig
from .evaluation import BoundProbeConfig
from .protocol import ConfigError, RunConfig

SECTION_TYPES = {
    "suite": SuiteConfig,
    "distill": DistillConfig,
    "run": RunConfig,
    "probe": BoundProbeConfig,
}

# sections that are plain dicts, validated downstream
FREEFORM_SECTIONS = {"comm_audit"}


def _coerce(value, typ):
    # dataclass field types are strings under `from __future__ import annotations`
    if str(typ).startswith("float") and isinstance(value, (int, float)):
        return float(value)
    return value


def build_section(cls, raw: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section '{path}'")
    kwargs = {}
    for name, value in raw.items():
        if name == "dp" and value is not None:
            value = build_section(DPConfig, value, f"{path}.dp")
        elif isinstance(value, list) and name in ("hidden_dims", "encoder_width_range"):
            value = tuple(value)
        kwargs[name] = _coerce(value, fields[name].type)
    obj = cls(**kwargs)
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid section '{path}': {e}") from e
    return obj


class FullConfig:
    """Parsed configuration bundle plus its canonical hash."""

    def __init__(self, raw: dict):
        unknown = set(raw) - set(SECTION_TYPES) - FREEFORM_SECTIONS
        if unknown:
            raise ConfigError(f"unknown top-level section(s) {sorted(unknown)}")
        self.raw = raw
        self.sections = {}
        for name, cls in SECTION_TYPES.items():
            if name in raw:
                self.sections[name] = build_section(cls, raw[name], name)
        for name in FREEFORM_SECTIONS:
            if name in raw:
                self.sections[name] = dict(raw[name])

    def __getitem__(self, name):
        if name not in self.sections:
            raise ConfigError(f"config is missing required section '{name}'")
        return self.sections[name]

    def get(self, name, default=None):
        return self.sections.get(name, default)

    @property
    def hash(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def parse_override(text: str):
    """Parse a `key=value` override; the value is read as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip(), parsed


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))   # deep copy
    for text in overrides:
        key, value = parse_override(text)
        parts = key.split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-section value")
        node[parts[-1]] = value
    return raw


def load_config(
    path: str | Path | None,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> FullConfig:
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    else:
        raw = {}
    raw = apply_overrides(raw, overrides or [])
    if seed is not None:
        for section in ("suite", "distill", "run", "probe"):
            if section in raw:
                raw[section]["seed"] = seed
            elif section in ("suite", "run"):
                raw[section] = {"seed": seed}
    return FullConfig(raw)
