"""Flat ``key = value`` run configuration with dotted keys.

Lines look like ``fdp.alpha = 0.10``; ``#`` starts a comment. Lists are
comma separated and the threshold grid also accepts ``start:stop:step``.
Unknown keys are rejected so typos surface as configuration errors.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_str(v: str) -> str | None:
    v = v.strip()
    return v or None


def _str_list(v: str) -> tuple[str, ...] | None:
    items = tuple(s.strip() for s in v.split(",") if s.strip())
    return items or None


def _int_list(v: str) -> tuple[int, ...] | None:
    items = _str_list(v)
    return None if items is None else tuple(int(s) for s in items)


def _marginals(v: str):
    """Comma-separated shape names, or ``;``-separated lists of probabilities."""
    v = v.strip()
    if not v:
        return None
    if ";" in v or any(ch.isdigit() for ch in v.split(",")[0]):
        return tuple(tuple(float(x) for x in part.split(",")) for part in v.split(";"))
    return _str_list(v)


def parse_grid(v: str) -> tuple[float, ...]:
    v = v.strip()
    if ":" in v:
        parts = [float(x) for x in v.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError("grid range must be start:stop:step with step > 0")
        start, stop, step = parts
        n = int(round((stop - start) / step)) + 1
        return tuple(round(start + k * step, 10) for k in range(n))
    return tuple(float(x) for x in v.split(",") if x.strip())


def _opt_float(v: str) -> float | None:
    v = v.strip()
    return None if v.lower() in ("", "none") else float(v)


def _opt_int(v: str) -> int | None:
    v = v.strip()
    return None if v.lower() in ("", "none") else int(v)


# key -> (parser, default)
KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "schema.variables": (_str_list, None),
    "schema.id_column": (_opt_str, "id"),
    "input.a": (_opt_str, None),
    "input.b": (_opt_str, None),
    "output.dir": (_opt_str, "out"),
    "threads": (int, None),
    "blocking.variable": (_opt_str, None),
    "linker.max_iter": (int, 500),
    "linker.rel_tol": (float, 1e-6),
    "linker.score_floor": (float, 0.01),
    "linker.xi": (float, 0.5),
    "synth.gamma": (float, 0.5),
    "synth.max_context": (int, 10),
    "synth.variable_order": (_str_list, None),
    "synth.tune": (_bool, False),
    "synth.n": (_opt_int, None),
    "synth.seed": (int, 0),
    "synth.folds": (int, 5),
    "fdp.alpha": (float, 0.10),
    "fdp.xi_grid": (parse_grid, parse_grid("0.50:0.99:0.01")),
    "fdp.repeats": (int, 10),
    "fdp.seed_base": (_opt_int, None),
    "fdp.aggregation_rule": (str, "mean_min1"),
    "fdp.target": (float, 0.10),
    "eval.truth": (_opt_str, None),
    "eval.links": (_opt_str, None),
    "eval.fdp_dir": (_opt_str, None),
    "sim.n_a": (int, 2000),
    "sim.n_b": (int, 5000),
    "sim.n_vars": (int, 5),
    "sim.cardinalities": (_int_list, None),
    "sim.marginals": (_marginals, None),
    "sim.overlap": (float, 0.75),
    "sim.discr_target": (_opt_float, 0.95),
    "sim.link_mechanism": (str, "at_random"),
    "sim.tilt_power": (float, 1.0),
    "sim.error_rate": (float, 0.0),
    "sim.missing_rate": (float, 0.0),
    "sim.duplicate_rate": (float, 0.0),
    "sim.max_combinations": (int, 10 ** 6),
    "sim.seed": (int, 0),
}


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)
    raw: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        v = self.values.get(key)
        return default if v is None else v

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def resolved_threads(self) -> int:
        return self.values.get("threads") or os.cpu_count() or 1

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = _unquote(value)
    return raw


def _unquote(v: str) -> str:
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "'\"":
        return v[1:-1]
    return v


def build(raw: dict[str, str], source: str = "<config>") -> RunConfig:
    values: dict[str, Any] = {}
    for key, (parse, default) in KEYS.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{source}: bad value for {key}: {exc}") from None
        else:
            values[key] = default
    return RunConfig(values, dict(raw))


def load_config(path: str | os.PathLike | None, overrides: dict[str, str] | None = None) -> RunConfig:
    raw: dict[str, str] = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        raw = parse_text(text, source)
    for key, value in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown override --{key}")
        raw[key] = value
    return build(raw, source)
