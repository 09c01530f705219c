"""Codec, loss and training configuration plus the key=value file format.

Config files hold one ``key = value`` per line; ``#`` starts a comment.
A bit interval may be given either as ``triple = c,m,f`` or explicitly as
``n``, ``n1``, ``n2`` (and optionally ``n1_prime``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError


@dataclass(frozen=True)
class StageConfig:
    c_point: int = 64
    c_voxel: int = 64
    c_latent: int = 32
    points_per_voxel: int = 4  # K
    k_group: int = 16
    gamma: float = 1.5
    evt_k: int = 16
    evt_c: float = 1.0
    evt_depth: int = 3


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.05
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.lam < 0:
            raise ConfigError("loss weights must be positive (lambda may be 0)")


@dataclass(frozen=True)
class CodecConfig:
    """Bit-interval endpoints ``0 <= n1' <= n1 <= n2 <= n`` and network sizes."""

    n: int
    n1: int
    n2: int
    n1_prime: int | None = None
    stage: StageConfig = field(default_factory=StageConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.n1_prime is None:
            object.__setattr__(self, "n1_prime", self.n1 - 1 if self.n1 < self.n else self.n1)
        if not 0 <= self.n1_prime <= self.n1 <= self.n2 <= self.n or self.n < 1:
            raise ConfigError(
                f"need 0 <= n1' <= n1 <= n2 <= n, got n1'={self.n1_prime} n1={self.n1} "
                f"n2={self.n2} n={self.n}"
            )
        if self.learned and self.n1 - self.n1_prime != 1:
            raise ConfigError("feature down/upsampling is fixed at one bit (n1 - n1' = 1)")

    @classmethod
    def from_triple(cls, c: int, m: int, f: int, **kw) -> "CodecConfig":
        if min(c, m, f) < 0:
            raise ConfigError(f"negative interval length in [{c},{m},{f}]")
        return cls(n=c + m + f, n1=c, n2=c + m, **kw)

    @property
    def triple(self) -> tuple[int, int, int]:
        return self.n1, self.n2 - self.n1, self.n - self.n2

    @property
    def s1(self) -> int:
        return 1 << (self.n - self.n2)

    @property
    def s2(self) -> int:
        return 1 << (self.n2 - self.n1)

    @property
    def s3(self) -> int:
        return 1 << (self.n1 - self.n1_prime)

    @property
    def point_stage(self) -> bool:
        return self.n2 < self.n

    @property
    def voxel_stage(self) -> bool:
        return self.n1 < self.n2

    @property
    def learned(self) -> bool:
        """False for the pure-octree configuration [n, 0, 0]."""
        return self.n1 < self.n

    def with_triple(self, c, m, f) -> "CodecConfig":
        return replace(self, n=c + m + f, n1=c, n2=c + m, n1_prime=None)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 8e-4
    batch_size: int = 8
    steps_per_epoch: int = 0  # 0: one pass over the clouds
    lambdas: tuple = ()
    seed: int = 0
    dataset: str = ""
    shape: str = "sphere"
    points: int = 2000
    voxel_budget: int = 1 << 15
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.steps_per_epoch < 0:
            raise ConfigError("batch size must be >= 1 and steps per epoch >= 0")


_STAGE_KEYS = {f.name for f in fields(StageConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_ALIASES = {"k": "points_per_voxel", "lambda": "lam", "n1p": "n1_prime"}


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[_ALIASES.get(key, key)] = val
    return out


def _num(key, val, kind):
    try:
        return kind(val)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r} as {kind.__name__}") from None


def _coerce(cls, key, val):
    typ = {f.name: f.type for f in fields(cls)}[key]
    if "tuple" in str(typ):
        return tuple(_num(key, v, float) for v in val.replace(";", ",").split(",") if v.strip())
    if "bool" in str(typ):
        return val.lower() in ("1", "true", "yes", "on")
    if "float" in str(typ):
        return _num(key, val, float)
    if "int" in str(typ):
        return _num(key, val, int)
    return val


def configs_from_dict(kv: dict) -> tuple[CodecConfig, TrainConfig]:
    kv = dict(kv)
    known = _STAGE_KEYS | _TRAIN_KEYS | {"n", "n1", "n2", "n1_prime", "triple", "lam", "alpha", "beta", "seed"}
    unknown = set(kv) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    stage = StageConfig(**{k: _coerce(StageConfig, k, v) for k, v in kv.items() if k in _STAGE_KEYS})
    loss = LossConfig(**{k: _num(k, kv[k], float) for k in ("lam", "alpha", "beta") if k in kv})
    seed = _num("seed", kv["seed"], int) if "seed" in kv else 0
    if "triple" in kv:
        parts = [_num("triple", p, int) for p in kv["triple"].split(",")]
        if len(parts) != 3:
            raise ConfigError("triple needs three comma-separated integers")
        codec = CodecConfig.from_triple(*parts, stage=stage, loss=loss, seed=seed)
    else:
        if "n" not in kv:
            raise ConfigError("config needs either 'triple' or 'n'")
        n = _num("n", kv["n"], int)
        n1 = _num("n1", kv.get("n1", str(n)), int)
        n2 = _num("n2", kv.get("n2", str(n1)), int)
        n1p = _num("n1_prime", kv["n1_prime"], int) if "n1_prime" in kv else None
        codec = CodecConfig(n, n1, n2, n1p, stage=stage, loss=loss, seed=seed)
    train_kw = {k: _coerce(TrainConfig, k, v) for k, v in kv.items() if k in _TRAIN_KEYS}
    train_kw.setdefault("seed", seed)
    return codec, TrainConfig(**train_kw)


def load_config(path) -> tuple[CodecConfig, TrainConfig]:
    with open(path, encoding="utf-8") as f:
        return configs_from_dict(parse_kv(f.read()))


def codec_to_text(cfg: CodecConfig) -> str:
    """Serialize everything needed to rebuild a model for ``cfg``."""
    lines = [f"n = {cfg.n}", f"n1 = {cfg.n1}", f"n2 = {cfg.n2}", f"n1_prime = {cfg.n1_prime}",
             f"seed = {cfg.seed}"]
    for f in fields(StageConfig):
        lines.append(f"{f.name} = {getattr(cfg.stage, f.name)}")
    lines += [f"lambda = {cfg.loss.lam!r}", f"alpha = {cfg.loss.alpha!r}", f"beta = {cfg.loss.beta!r}"]
    return "\n".join(lines) + "\n"


def codec_from_text(text: str) -> CodecConfig:
    return configs_from_dict(parse_kv(text))[0]
