"""Job configuration: strict JSON parsing, defaults, serialization and hashing.

Every scientific parameter lives here; command-line flags only select the
command, seeds, truncation mode and output paths.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

from .composer import LossWeights, ScheduleConfig, MODES
from .genmodel import ADAPTIVE_TRUNCATION

COMMANDS = ("sample", "refine", "joint", "montage", "walk", "eval", "gradcheck")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending path."""


@dataclass
class GeneratorConfig:
    seed: int = 1
    resolution: int = 256
    n_layers: int = 18
    latent_dim: int = 32
    channels: int = 8
    shift_pattern: float = 1.0


@dataclass
class TruncationConfig:
    mode: str = "none"          # none | scalar | adaptive
    t: float = 0.7
    table: list = field(default_factory=lambda: list(ADAPTIVE_TRUNCATION))


@dataclass
class InitConfig:
    mode: str = "truncated_random"   # average | truncated_random
    alpha: float = 0.5


@dataclass
class WalkConfig:
    n_keyframes: int = 2
    frames_per_segment: int = 20
    iters_per_frame: int = 100
    cyclic: bool = True


@dataclass
class EvalConfig:
    n_samples: int = 50
    k: int = 3
    margin: int = 8
    reference_offset: int = 1000000


@dataclass
class GradcheckConfig:
    points: int = 10
    eps: float = 1e-7
    coords: int = 24
    seed: int = 0


@dataclass
class JobConfig:
    canvas: GeneratorConfig = field(default_factory=GeneratorConfig)
    insets: list = field(default_factory=lambda: [GeneratorConfig(seed=2, resolution=64)])
    joint_mode: str = "joint_refine"
    schedule: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    init: InitConfig = field(default_factory=InitConfig)
    seeds: list = field(default_factory=lambda: [0])
    master_seed: int = 0
    n_avg: int = 10000
    feature_seed: int = 7
    walk: WalkConfig = field(default_factory=WalkConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    # derived objects -------------------------------------------------------

    def schedule_for(self, mode: str) -> ScheduleConfig:
        try:
            return ScheduleConfig.for_mode(mode, **self.schedule)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"schedule: {exc}") from exc

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights().override(self.weights)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"weights: {exc.args[0]}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parsing


class _Object(dict):
    """JSON object that remembers keys seen more than once."""
    duplicates: tuple = ()


def _note_duplicates(pairs):
    out = _Object()
    dups = []
    for k, v in pairs:
        if k in out:
            dups.append(k)
        out[k] = v
    out.duplicates = tuple(dups)
    return out


def _no_duplicates(data, path: str):
    for key in getattr(data, "duplicates", ()):
        raise ConfigError(f"{path}.{key}: duplicate key" if path else f"{key}: duplicate key")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _check(path: str, value, expected):
    if expected is int and not _is_int(value):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if expected is float and not _is_num(value):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if expected is bool and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected true or false, got {value!r}")
    if expected is str and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return float(value) if expected is float else value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    _no_duplicates(data, path)
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")
    obj = cls()
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        default = getattr(obj, name)
        setattr(obj, name, _convert(where, value, default, name, cls))
    return obj


def _convert(path, value, default, name, cls):
    if is_dataclass(default):
        return _build(type(default), value, path)
    if cls is JobConfig and name == "insets":
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{path}: expected a non-empty list of generator objects")
        return [_build(GeneratorConfig, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if cls is JobConfig and name == "seeds":
        return parse_seeds(value, path)
    if cls is JobConfig and name in ("schedule", "weights"):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        _no_duplicates(value, path)
        return _overrides(path, value, name)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_check(f"{path}[{i}]", v, float) for i, v in enumerate(value)]
    if isinstance(default, bool):
        return _check(path, value, bool)
    if isinstance(default, int):
        return _check(path, value, int)
    if isinstance(default, float):
        return _check(path, value, float)
    return _check(path, value, str)


def _overrides(path: str, value: dict, which: str) -> dict:
    if which == "schedule":
        allowed = {f.name: f.type for f in fields(ScheduleConfig)}
        out = {}
        for k, v in value.items():
            if k not in allowed:
                raise ConfigError(f"{path}.{k}: unknown key")
            kind = str(allowed[k])
            out[k] = _check(f"{path}.{k}", v, float if "float" in kind else str if "str" in kind else int)
        return out
    names = set(LossWeights().flat())
    out = {}
    for k, v in value.items():
        if k not in names:
            raise ConfigError(f"{path}.{k}: unknown key")
        out[k] = _check(f"{path}.{k}", v, float)
    return out


_RANGE = re.compile(r"^\s*(-?\d+)\s*\.\.\s*(-?\d+)\s*$")


def parse_seeds(value, path: str = "seeds") -> list:
    """Seeds from a list of ints, an int, or an inclusive ``"a..b"`` range."""
    if _is_int(value):
        return [value]
    if isinstance(value, str):
        m = _RANGE.match(value)
        if m:
            a, b = int(m.group(1)), int(m.group(2))
            if b < a:
                raise ConfigError(f"{path}: empty range {value!r}")
            return list(range(a, b + 1))
        try:
            return [int(s) for s in value.split(",")]
        except ValueError:
            raise ConfigError(f"{path}: cannot parse seeds from {value!r}") from None
    if isinstance(value, list) and value and all(_is_int(v) for v in value):
        return list(value)
    raise ConfigError(f"{path}: expected an integer, a list of integers or 'a..b'")


def validate(cfg: JobConfig) -> JobConfig:
    for where, g in [("canvas", cfg.canvas)] + [(f"insets[{i}]", g) for i, g in enumerate(cfg.insets)]:
        if g.resolution < 4 or g.resolution & (g.resolution - 1):
            raise ConfigError(f"{where}.resolution: must be a power of two >= 4")
        for name in ("n_layers", "latent_dim", "channels"):
            if getattr(g, name) < 1:
                raise ConfigError(f"{where}.{name}: must be positive")
        if g.shift_pattern < 0:
            raise ConfigError(f"{where}.shift_pattern: must be >= 0")
    for i, g in enumerate(cfg.insets):
        if g.resolution < 64 or g.resolution % 64:
            raise ConfigError(f"insets[{i}].resolution: inset images must be a multiple of 64")
    if cfg.joint_mode not in MODES or cfg.joint_mode in ("refine_inset", "montage"):
        raise ConfigError(f"joint_mode: expected joint_refine, body_for_face or multi_inset, "
                          f"got {cfg.joint_mode!r}")
    t = cfg.truncation
    if t.mode not in ("none", "scalar", "adaptive"):
        raise ConfigError(f"truncation.mode: expected none, scalar or adaptive, got {t.mode!r}")
    if not 0.0 <= t.t <= 1.0:
        raise ConfigError("truncation.t: must lie in [0, 1]")
    if len(t.table) != cfg.canvas.n_layers or any(not 0.0 <= v <= 1.0 for v in t.table):
        raise ConfigError(f"truncation.table: needs {cfg.canvas.n_layers} values in [0, 1]")
    if cfg.init.mode not in ("average", "truncated_random"):
        raise ConfigError(f"init.mode: expected average or truncated_random, got {cfg.init.mode!r}")
    if not 0.0 <= cfg.init.alpha <= 1.0:
        raise ConfigError("init.alpha: must lie in [0, 1]")
    if cfg.n_avg < 1:
        raise ConfigError("n_avg: must be >= 1")
    if cfg.walk.frames_per_segment < 2 or cfg.walk.iters_per_frame < 0 or cfg.walk.n_keyframes < 1:
        raise ConfigError("walk: frames_per_segment >= 2, iters_per_frame >= 0, n_keyframes >= 1")
    if cfg.eval.n_samples < 2 or cfg.eval.k < 1 or cfg.eval.k >= cfg.eval.n_samples:
        raise ConfigError("eval: need n_samples >= 2 and 1 <= k < n_samples")
    if cfg.gradcheck.points < 1 or cfg.gradcheck.eps <= 0:
        raise ConfigError("gradcheck: points >= 1 and eps > 0")
    for mode in MODES:
        cfg.schedule_for(mode)
    cfg.loss_weights()
    return cfg


def loads(text: str) -> JobConfig:
    if not text.strip():
        return JobConfig()
    try:
        data = json.loads(text, object_pairs_hook=_note_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return validate(_build(JobConfig, data, ""))


def load_config(path) -> JobConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg: JobConfig) -> str:
    return cfg.to_json()


def with_seeds(cfg: JobConfig, seeds: Optional[list]) -> JobConfig:
    if seeds is not None:
        cfg.seeds = list(seeds)
    return cfg
