"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Every key has a default; unknown
keys and unparsable values raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "format_config"]


class ConfigError(ValueError):
    pass


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pair(text, sep="x"):
    parts = text.lower().replace(",", sep).split(sep)
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {text!r}")
    return int(parts[0]), int(parts[1])


def _opt_float(text):
    return None if text.strip().lower() in ("auto", "none", "") else float(text)


def _path(text):
    return text.strip() or None


PARSERS = {bool: _bool, int: int, float: float, str: str.strip, tuple: _pair}

PATH_KEYS = ("weights", "annotations", "mining_images", "lambda_images", "edge_images", "edge_labels", "lambdas_file")


@dataclass
class RunConfig:
    """All tunables of a run, with their defaults.

    Paths are checked for existence by :meth:`validate`.
    """

    # channels
    backend: str = "hogluv"  # hogluv | conv | concat (hogluv + conv)
    weights: str = None
    shrink: int = 4
    # pyramid
    per_octave: int = 6
    canvas: int = 932
    pad: int = 16
    approx: bool = False
    patchwork: bool = False
    upsample: int = 1
    lambdas_file: str = None
    # forest
    n_trees: int = 2048
    depth: int = 3
    frac_features: float = 1.0 / 16
    seed: int = 0
    cascade_every: int = 32
    cascade_margin: float = 0.5
    # detector
    window: tuple = (128, 64)
    threshold: float = None  # None: last soft-cascade stage
    nms_overlap: float = 0.65
    box_ratio: tuple = (1.0, 1.0)
    rounds: int = 3
    n_neg_per_image: int = 25
    n_mine: int = 5000
    mine_per_image: int = 25
    mine_threshold: float = None
    jitter: int = 4
    min_height: float = 50.0
    # data
    annotations: str = None
    mining_images: str = None
    lambda_images: str = None
    edge_images: str = None
    edge_labels: str = None
    # edges
    edge_trees: int = 8
    edge_depth: int = 16
    edge_per_image: int = 150
    edge_pairs: int = 2560
    edge_stride: int = 2
    multiscale: bool = False
    # bench
    bench_size: tuple = (480, 640)
    bench_repeats: int = 1
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)

    extra_parsers = {
        "threshold": _opt_float,
        "mine_threshold": _opt_float,
        "box_ratio": lambda t: tuple(float(v) for v in t.lower().replace(",", "x").split("x")),
        **{k: _path for k in PATH_KEYS},
    }

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]

    def set(self, key, text):
        names = {f.name: f for f in dataclasses.fields(self)}
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        parse = self.extra_parsers.get(key)
        if parse is None:
            kind = type(getattr(RunConfig(), key))
            parse = PARSERS[kind]
        try:
            setattr(self, key, parse(text))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc

    def validate(self):
        if self.backend not in ("hogluv", "conv", "concat"):
            raise ConfigError(f"bad value for 'backend': {self.backend!r}")
        if self.backend != "hogluv" and not self.weights:
            raise ConfigError(f"'weights' is required for backend {self.backend!r}")
        for key in PATH_KEYS:
            p = getattr(self, key)
            if p is not None and not os.path.exists(p):
                raise ConfigError(f"path for {key!r} does not exist: {p}")
        positive = ("per_octave", "canvas", "n_trees", "depth", "edge_trees", "edge_depth", "workers", "shrink")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key!r} must be positive")
        if self.approx and not self.lambdas_file:
            raise ConfigError("'approx' needs 'lambdas_file' (see the fit-lambda command)")
        if not 0 < self.frac_features <= 1:
            raise ConfigError("'frac_features' must be in (0, 1]")
        if not 0 < self.nms_overlap < 1:
            raise ConfigError("'nms_overlap' must be in (0, 1)")
        if self.upsample not in (1, 2):
            raise ConfigError("'upsample' must be 1 or 2")
        if self.window[0] % self.shrink or self.window[1] % self.shrink:
            raise ConfigError(f"'window' {self.window} not divisible by shrink {self.shrink}")
        if self.edge_stride % 2:
            raise ConfigError("'edge_stride' must be even")
        return self

    @property
    def pyramid_mode(self):
        if self.approx:
            return "approx+patchwork" if self.patchwork else "approx"
        return "patchwork" if self.patchwork else "exact"

    def digest(self):
        return hashlib.sha256(format_config(self, include_workers=False).encode()).hexdigest()


def _format_value(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return "x".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: RunConfig, include_workers=True) -> str:
    """Canonical text form; ``parse_config(format_config(c))`` equals ``c``."""
    lines = []
    for key in RunConfig.keys():
        if key == "workers" and not include_workers:
            continue
        v = getattr(cfg, key)
        text = "" if v is None and key in PATH_KEYS else _format_value(v)
        lines.append(f"{key} = {text}".rstrip())
    return "\n".join(lines) + "\n"


def parse_config(text: str, overrides=None) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        cfg.set(key.strip(), value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg


def load_config(path, overrides=None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, overrides)
    base = os.path.dirname(os.path.abspath(path))
    for key in PATH_KEYS:
        p = getattr(cfg, key)
        if p is not None and not os.path.isabs(p):
            setattr(cfg, key, os.path.join(base, p))
    return cfg
