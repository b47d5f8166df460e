"""Run configuration: YAML text in, validated :class:`RunConfig` out."""

from dataclasses import dataclass, field, asdict
import hashlib
import json
import os

import yaml

from .errors import ConfigError, InvalidInputError
from .fields import DEFAULT_ETA, field_from_dict

PIPELINE = ("cell", "strip", "params", "simulate", "verify", "compare")

_SECTIONS = {
    "grid": {"n": 64, "k_trunc": 8, "order": 4},
    "sim": {"epsilon": 0.05, "a": 0.75, "dt": 1e-3, "n_paths": 10_000, "bridge": True,
            "starts": None, "tangential_x0": None},
    "limit": {"h": 0.01, "T": 1.0, "n_paths": 10_000},
    "compare": {"epsilon": 0.1, "t": 1.0, "dt": 5e-3, "n_paths": 2000},
    "export": {"n_paths": 0, "T_micro": 20.0, "dt": 1e-3, "stride": 10, "limit_stride": 100},
}
_TOP = {"field", "seed", "stages", "out", "strict"} | set(_SECTIONS)


@dataclass
class RunConfig:
    field: dict
    field_path: str = None
    seed: int = 0
    stages: tuple = PIPELINE
    out: str = "results"
    strict: bool = False
    grid: dict = field(default_factory=lambda: dict(_SECTIONS["grid"]))
    sim: dict = field(default_factory=lambda: dict(_SECTIONS["sim"]))
    limit: dict = field(default_factory=lambda: dict(_SECTIONS["limit"]))
    compare: dict = field(default_factory=lambda: dict(_SECTIONS["compare"]))
    export: dict = field(default_factory=lambda: dict(_SECTIONS["export"]))
    field_text: str = None

    @property
    def eta(self):
        return float(self.field.get("eta", DEFAULT_ETA))

    @property
    def a(self):
        return float(self.sim["a"])

    @property
    def k_trunc(self):
        return int(self.grid["k_trunc"])

    @property
    def dim(self):
        return int(self.field["dim"])

    def drift(self):
        return field_from_dict(self.field)

    def with_stages(self, last):
        """Copy whose stage list is the pipeline prefix ending at ``last``."""
        if last not in PIPELINE:
            raise ConfigError(f"unknown stage '{last}'", field="stages")
        cfg = RunConfig(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        cfg.stages = PIPELINE[:PIPELINE.index(last) + 1]
        return cfg

    def canonical(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("field_path", "field_text", "out")}
        d["stages"] = list(self.stages)
        return d

    def hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def field_hash(self):
        blob = (self.field_text or json.dumps(self.field, sort_keys=True)).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _load_yaml(text, what):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"cannot parse {what}: {getattr(exc, 'problem', exc)}", line=line) from exc


def _check_type(name, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected true or false", field=name)
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=name)
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=name)
        return float(value)
    return value


def _section(name, data):
    defaults = _SECTIONS[name]
    if data is None:
        return dict(defaults)
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", field=name)
    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'", field=f"{name}.{unknown[0]}")
    out = dict(defaults)
    for k, v in data.items():
        ref = defaults[k]
        if ref is None or v is None:
            out[k] = v
        else:
            out[k] = _check_type(f"{name}.{k}", v, type(ref))
    return out


def validate_stages(stages):
    if isinstance(stages, str):
        stages = [stages]
    if not isinstance(stages, (list, tuple)) or not stages:
        raise ConfigError("expected a non-empty list of stage names", field="stages")
    for s in stages:
        if s not in PIPELINE:
            raise ConfigError(f"unknown stage '{s}' (known: {', '.join(PIPELINE)})", field="stages")
    want = set(stages)
    last = max(PIPELINE.index(s) for s in stages)
    missing = [s for s in PIPELINE[:last] if s not in want]
    if missing:
        raise ConfigError(f"stage '{PIPELINE[last]}' needs '{missing[-1]}' first "
                          "(stages must be a prefix of the pipeline)", field="stages")
    return PIPELINE[:last + 1]


def _validate_values(cfg):
    g, s, lim, cmp_ = cfg.grid, cfg.sim, cfg.limit, cfg.compare
    if g["n"] < 8:
        raise ConfigError("grid resolution must be >= 8", field="grid.n")
    if g["k_trunc"] < 4:
        raise ConfigError("need at least 4 cells per side", field="grid.k_trunc")
    if g["order"] not in (2, 4):
        raise ConfigError("finite-difference order must be 2 or 4", field="grid.order")
    if not 0 < s["epsilon"] <= 1:
        raise ConfigError("must lie in (0, 1]", field="sim.epsilon")
    if not 0.5 < s["a"] < 1:
        raise ConfigError("must lie in (1/2, 1)", field="sim.a")
    if not s["dt"] > 0:
        raise ConfigError("must be positive", field="sim.dt")
    if s["n_paths"] < 100:
        raise ConfigError("need at least 100 paths", field="sim.n_paths")
    if not lim["h"] > 0 or not lim["T"] > 0:
        raise ConfigError("h and T must be positive", field="limit")
    if cmp_["n_paths"] < 1000:
        raise ConfigError("need at least 1000 samples", field="compare.n_paths")
    if not 0 < cmp_["epsilon"] <= 1:
        raise ConfigError("must lie in (0, 1]", field="compare.epsilon")
    if cfg.seed < 0 or cfg.seed >= 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer", field="seed")


def parse_config(text, base_dir=None):
    """Parse and validate a YAML run configuration.

    ``field`` is either a path (relative to ``base_dir``) to a YAML field
    file or an inline mapping.
    """
    data = _load_yaml(text, "configuration")
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    unknown = sorted(set(data) - _TOP)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'", field=unknown[0])
    if "field" not in data:
        raise ConfigError("missing field definition", field="field")
    spec = data["field"]
    field_path, field_text = None, None
    if isinstance(spec, str):
        field_path = spec if base_dir is None else os.path.join(base_dir, spec)
        if not os.path.isfile(field_path):
            raise ConfigError(f"file not found: {field_path}", field="field")
        with open(field_path) as fh:
            field_text = fh.read()
        spec = _load_yaml(field_text, f"field file {field_path}")
    if not isinstance(spec, dict):
        raise ConfigError("expected a mapping or a file path", field="field")
    try:
        field_from_dict(spec)
    except (InvalidInputError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc), field="field") from exc
    kw = {name: _section(name, data.get(name)) for name in _SECTIONS}
    seed = _check_type("seed", data.get("seed", 0), int)
    strict = _check_type("strict", data.get("strict", False), bool)
    out = data.get("out", "results")
    if not isinstance(out, str):
        raise ConfigError("expected a directory path", field="out")
    stages = validate_stages(data.get("stages", list(PIPELINE)))
    cfg = RunConfig(field=spec, field_path=field_path, seed=seed, stages=stages, out=out,
                    strict=strict, field_text=field_text, **kw)
    _validate_values(cfg)
    return cfg


def load_config(path):
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))
