"""Training configuration: nested dataclasses addressed by dotted keys.

Config files are UTF-8 ``key=value`` lines (``#`` starts a comment), for
example ``hr.lambda_kl=1``. Unknown keys and out-of-range values raise
:class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from ..bpa import CORR_MODES, FILTER_MODES
from ..blocks import HEADS
from ..hr import KD_MODES
from ..predictor import PREDICTORS


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    dir: str = ""  # manifest directory; empty = generate synthetic blocks in memory
    scenes: int = 40
    seed: int = 1234
    block_points: int = 512
    block_size: float = 1.0
    min_points: int = 50
    room: float = 3.0
    clutter: float = 0.4
    noise: float = 0.004
    walls: bool = True


@dataclass
class ExtractorSection:
    widths: tuple[int, ...] = (32, 32, 64)
    k: int = 10
    dim: int = 64
    head: str = "auto"  # auto: linear projector for proto, self-attention for mpti


@dataclass
class ProtoSection:
    t: float = 15.0


@dataclass
class MptiSection:
    n_s: int = 10
    n_q: int = 10
    alpha: float = 0.99
    graph_k: int = 20


@dataclass
class BpaSection:
    enabled: bool = False
    use_c1: bool = True
    use_g: bool = True
    use_r: bool = True
    filter: str = "gate"
    corr: str = "paper"
    adapt_fg: bool = False


@dataclass
class HrSection:
    enabled: bool = False
    mode: str = "kl"
    t_kl: float = 1.0
    lambda_kl: float = 1.0


@dataclass
class PretrainSection:
    epochs: int = 10
    batch: int = 8
    lr: float = 1e-3


@dataclass
class TrainSection:
    iterations: int = 2000
    lr_extractor: float = 1e-4
    lr: float = 1e-3
    lr_step: int = 5000
    lr_gamma: float = 0.5
    log_every: int = 100


@dataclass
class AugSection:
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    rotate: bool = True


@dataclass
class EvalSection:
    episodes: int = 100
    seed: int = 10_000
    include_bg: bool = False


@dataclass
class TrainConfig:
    seed: int = 0
    predictor: str = "proto"
    split: int = 0
    n_way: int = 1
    k_shot: int = 1
    n_queries: int = 1
    data: DataSection = field(default_factory=DataSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    proto: ProtoSection = field(default_factory=ProtoSection)
    mpti: MptiSection = field(default_factory=MptiSection)
    bpa: BpaSection = field(default_factory=BpaSection)
    hr: HrSection = field(default_factory=HrSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    aug: AugSection = field(default_factory=AugSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- dotted access -------------------------------------------------------

    def get(self, key: str) -> Any:
        obj, name = _resolve(self, key)
        return getattr(obj, name)

    def set(self, key: str, value: Any) -> None:
        obj, name = _resolve(self, key)
        ftype = {f.name: f.type for f in dataclasses.fields(obj)}[name]
        setattr(obj, name, _coerce(key, value, getattr(obj, name), ftype))

    def updated(self, pairs: dict[str, Any] | Iterable[tuple[str, Any]]) -> "TrainConfig":
        """A validated copy with ``pairs`` applied."""
        new = copy_config(self)
        for k, v in dict(pairs).items():
            new.set(k, v)
        new.validate()
        return new

    def flat(self) -> dict[str, Any]:
        return dict(_flatten(self))

    def head(self) -> str:
        if self.extractor.head != "auto":
            return self.extractor.head
        return "linear_projector" if self.predictor == "proto" else "self_attention"

    def validate(self) -> "TrainConfig":
        def need(ok: bool, key: str, what: str):
            if not ok:
                raise ConfigError(f"{key}={self.get(key)!r}: {what}")

        need(self.predictor in PREDICTORS, "predictor", f"expected one of {PREDICTORS}")
        need(self.split in (0, 1), "split", "expected 0 or 1")
        for key in ("n_way", "k_shot", "n_queries"):
            need(self.get(key) >= 1, key, "must be >= 1")
        d = self.data
        need(d.scenes >= 1, "data.scenes", "must be >= 1")
        need(d.block_points >= 16, "data.block_points", "must be >= 16")
        need(d.block_size > 0, "data.block_size", "must be positive")
        need(d.min_points >= 1, "data.min_points", "must be >= 1")
        need(d.room >= d.block_size, "data.room", "must be at least one block wide")
        need(d.clutter >= 0, "data.clutter", "must be >= 0")
        need(d.noise >= 0, "data.noise", "must be >= 0")
        e = self.extractor
        need(len(e.widths) >= 1 and all(w >= 1 for w in e.widths), "extractor.widths", "need positive widths")
        need(e.k >= 1, "extractor.k", "must be >= 1")
        need(e.k < d.block_points, "extractor.k", "must be smaller than data.block_points")
        need(e.dim >= 1, "extractor.dim", "must be >= 1")
        need(e.head == "auto" or e.head in HEADS, "extractor.head", f"expected auto or one of {HEADS}")
        need(self.proto.t > 0, "proto.t", "must be positive")
        m = self.mpti
        need(m.n_s >= 1, "mpti.n_s", "must be >= 1")
        need(m.n_q >= 1, "mpti.n_q", "must be >= 1")
        need(0 <= m.alpha < 1, "mpti.alpha", "must lie in [0, 1)")
        need(m.graph_k >= 1, "mpti.graph_k", "must be >= 1")
        need(self.bpa.filter in FILTER_MODES, "bpa.filter", f"expected one of {FILTER_MODES}")
        need(self.bpa.corr in CORR_MODES, "bpa.corr", f"expected one of {CORR_MODES}")
        need(self.hr.mode in KD_MODES, "hr.mode", f"expected one of {KD_MODES}")
        need(self.hr.t_kl > 0, "hr.t_kl", "must be positive")
        need(self.hr.lambda_kl >= 0, "hr.lambda_kl", "must be >= 0")
        p = self.pretrain
        need(p.epochs >= 0, "pretrain.epochs", "must be >= 0")
        need(p.batch >= 1, "pretrain.batch", "must be >= 1")
        need(p.lr > 0, "pretrain.lr", "must be positive")
        t = self.train
        need(t.iterations >= 0, "train.iterations", "must be >= 0")
        need(t.lr_extractor >= 0, "train.lr_extractor", "must be >= 0")
        need(t.lr > 0, "train.lr", "must be positive")
        need(t.lr_step >= 1, "train.lr_step", "must be >= 1")
        need(0 < t.lr_gamma <= 1, "train.lr_gamma", "must lie in (0, 1]")
        need(t.log_every >= 1, "train.log_every", "must be >= 1")
        need(self.aug.jitter_sigma >= 0, "aug.jitter_sigma", "must be >= 0")
        need(self.aug.jitter_clip >= 0, "aug.jitter_clip", "must be >= 0")
        need(self.eval.episodes >= 1, "eval.episodes", "must be >= 1")
        return self


def copy_config(cfg: TrainConfig) -> TrainConfig:
    return dataclasses.replace(
        cfg, **{f.name: dataclasses.replace(getattr(cfg, f.name)) for f in dataclasses.fields(cfg) if dataclasses.is_dataclass(getattr(cfg, f.name))}
    )


def _resolve(cfg, key: str):
    parts = key.split(".")
    obj = cfg
    for i, part in enumerate(parts):
        names = {f.name for f in dataclasses.fields(obj)}
        if part not in names:
            raise ConfigError(f"unknown config key {key!r}")
        if i == len(parts) - 1:
            if dataclasses.is_dataclass(getattr(obj, part)):
                raise ConfigError(f"{key!r} is a section, not a key")
            return obj, part
        obj = getattr(obj, part)
        if not dataclasses.is_dataclass(obj):
            raise ConfigError(f"unknown config key {key!r}")
    raise ConfigError(f"unknown config key {key!r}")


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, value: Any, current: Any, ftype: str) -> Any:
    try:
        if isinstance(current, bool):
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError("not a boolean")
        if isinstance(current, tuple):
            items = value if isinstance(value, (list, tuple)) else [x for x in str(value).split(",") if x.strip()]
            return tuple(int(x) for x in items)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            return int(float(value)) if isinstance(value, str) and "e" in value.lower() else int(value)
        if isinstance(current, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}={value!r}: {exc}") from None


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            yield from _flatten(v, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", list(v) if isinstance(v, tuple) else v


def parse_pairs(lines: Iterable[str], origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    pairs: dict[str, str] = {}
    if path is not None:
        pairs.update(parse_pairs(Path(path).read_text(encoding="utf-8").splitlines(), str(path)))
    pairs.update(parse_pairs(overrides, "--set"))
    return TrainConfig().updated(pairs)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.flat().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
