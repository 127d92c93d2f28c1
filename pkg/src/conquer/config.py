"""Run configuration: flat ``key=value`` text with typed validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, get_type_hints

from .data import SyntheticSpec


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class ModelConfig:
    hidden: int = 32
    max_clips: int = 100
    max_tokens: int = 30
    visual_dim: int = 4352
    text_dim: int = 768
    mmt_layers: int = 1
    query_layers: int = 1
    head_layers: int = 1
    n_heads: int = 4
    ff_mult: int = 4
    n_clusters: int = 32
    conv_kernel: int = 5
    qdf: str = "learned"
    qal: str = "on"
    vs_head: str = "off"
    model_seed: int = 0

    def validate(self) -> None:
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by n_heads={self.n_heads}", "hidden")
        for key in ("max_clips", "max_tokens", "hidden", "n_clusters", "visual_dim", "text_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be a positive odd number", "conv_kernel")
        _choice(self, "qdf", ("learned", "average"))
        _choice(self, "qal", ("on", "off"))
        _choice(self, "vs_head", ("on", "off"))


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    n_neg: int = 3
    depth_extension_x: int = 500
    loss_w_moment: float = 1e-2
    loss_w_video: float = 5e-2
    scoring: str = "general"
    patience: int = 3
    exclusion_depth: int = 100
    max_epochs: int = 30
    val_top_k: int = 10
    train_seed: int = 0

    def validate(self) -> None:
        _choice(self, "scoring", ("general", "exclusive", "disjoint"))
        if self.n_neg < 0:
            raise ConfigError("n_neg must be >= 0", "n_neg")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0", "lr")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1", "patience")


@dataclass
class RetrievalConfig:
    l_min: int = 1
    l_max: int = 24
    nms_iou: float = 0.7
    keep_n: int = 100
    top_k: int = 10
    max_results: int = 100

    def validate(self) -> None:
        if not 1 <= self.l_min <= self.l_max:
            raise ConfigError("need 1 <= l_min <= l_max", "l_min")
        if not 0 < self.nms_iou <= 1:
            raise ConfigError("nms_iou must be in (0, 1]", "nms_iou")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1", "top_k")


@dataclass
class PathConfig:
    corpus_dir: str = ""
    out_dir: str = "runs/default"
    checkpoint: str = ""
    log_level: str = "INFO"


def _choice(obj, key: str, options: Iterable[str]) -> None:
    if getattr(obj, key) not in options:
        raise ConfigError(f"{key}={getattr(obj, key)!r} must be one of {tuple(options)}", key)


SYNTH_PREFIX = "synth_"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)

    def _sections(self):
        return {"model": self.model, "train": self.train, "retrieval": self.retrieval,
                "paths": self.paths, "synth": self.synth}

    def _locate(self, key: str):
        if key.startswith(SYNTH_PREFIX):
            name = key[len(SYNTH_PREFIX):]
            if name in {f.name for f in fields(SyntheticSpec)}:
                return self.synth, name
        else:
            for section in (self.model, self.train, self.retrieval, self.paths):
                if key in {f.name for f in fields(section)}:
                    return section, key
        raise ConfigError(f"unknown config key {key!r}", key)

    def set(self, key: str, raw: str) -> None:
        section, name = self._locate(key)
        hint = get_type_hints(type(section))[name]
        try:
            value = _coerce(raw, hint)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", key) from None
        setattr(section, name, value)

    def update(self, pairs: dict[str, Any]) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, v if isinstance(v, str) else _render(v))
        return self

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.retrieval.validate()
        try:
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(str(exc), "synth") from None
        return self

    def items(self) -> list[tuple[str, Any]]:
        out = []
        for sname, section in self._sections().items():
            prefix = SYNTH_PREFIX if sname == "synth" else ""
            for f in fields(section):
                out.append((prefix + f.name, getattr(section, f.name)))
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={_render(v)}\n" for k, v in self.items())

    def copy(self) -> "RunConfig":
        return parse_config(self.dumps())


def _render(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, hint) -> Any:
    raw = raw.strip()
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if hint is str:
        return raw
    origin = getattr(hint, "__origin__", None)
    if origin is tuple:
        args = hint.__args__
        item = args[0]
        parts = [p for p in raw.split(",") if p.strip()]
        vals = tuple(_coerce(p, item) for p in parts)
        if len(args) > 1 and args[1] is not Ellipsis and len(vals) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return vals
    raise ValueError(f"unsupported type {hint}")


def parse_config(text: str, overrides: Iterable[str] = ()) -> RunConfig:
    """Parse ``key=value`` lines (``#`` comments allowed), then apply ``overrides``."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value)
    return cfg.validate()


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, overrides)


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
