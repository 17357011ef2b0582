"""
Run configuration: defaults, flat key=value files, EFL_ environment variables
and command-line overrides, in ascending precedence.

The same key=value text travels inside ConfigTransfer messages in SDT mode.
"""

from __future__ import annotations

import enum
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

from dotenv import dotenv_values

from attest import Authority, EnclaveIdentity, VerifyPolicy, measure
from channel import DEFAULT_HANDSHAKE_TIMEOUT, ChannelMode
from dlrm import DlrmConfig
from errors import ConfigError

logger = logging.getLogger(__name__)

BUILD_ID = "efl-dlrm/1.0"
ENV_PREFIX = "EFL_"
DEFAULT_PS_ADDR = "127.0.0.1:7400"
DEFAULT_CHIEF_ADDR = "127.0.0.1:7401"
# Parameter storage; float64 is the check mode used to compare against centralized SGD.
PRECISIONS = ("float32", "float64")


class Mode(str, enum.Enum):
    HFL = "hfl"
    SDT = "sdt"


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _hex_list(text: str) -> tuple[bytes, ...]:
    values = tuple(bytes.fromhex(part.strip()) for part in text.split(",") if part.strip())
    if any(len(v) != 32 for v in values):
        raise ValueError("measurements are 32-byte hex digests")
    return values


def _optional(text: str) -> Optional[str]:
    return text or None


def _precision(text: str) -> str:
    name = text.lower()
    if name not in PRECISIONS:
        raise ValueError(f"expected one of {', '.join(PRECISIONS)}")
    return name


def _log_level(text: str) -> str:
    level = text.upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ValueError(f"unknown log level {text}")
    return level


_PARSERS: dict[str, Callable[[str], object]] = {
    "mode": lambda s: Mode(s.lower()),
    "num_workers": int,
    "rounds": int,
    "batch_size": int,
    "learning_rate": float,
    "seed": int,
    "num_dense": int,
    "num_sparse": int,
    "vocab_size": int,
    "vocab_sizes": _int_list,
    "embed_dim": int,
    "bottom_mlp": _int_list,
    "top_mlp": _int_list,
    "precision": _precision,
    "channel_mode": lambda s: ChannelMode(s.lower()),
    "build_id": str,
    "authority_key": _optional,
    "allowed_measurements": _hex_list,
    "ps_addr": str,
    "chief_addr": str,
    "worker_index": int,
    "shard_path": _optional,
    "dataset_path": _optional,
    "samples": int,
    "data_seed": int,
    "teacher_noise": float,
    "metrics_out": _optional,
    "export_model": _optional,
    "handshake_timeout": float,
    "round_timeout": float,
    "log_level": _log_level,
}

CONFIG_KEYS = frozenset(_PARSERS)

# Shipped from the chief to the PS and workers in SDT mode.
TRANSFER_KEYS = (
    "mode",
    "num_workers",
    "rounds",
    "batch_size",
    "learning_rate",
    "seed",
    "num_dense",
    "num_sparse",
    "vocab_sizes",
    "embed_dim",
    "bottom_mlp",
    "top_mlp",
    "precision",
)


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(v.hex() if isinstance(v, bytes) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    mode: Mode = Mode.HFL
    num_workers: int = 4
    rounds: int = 100
    local_batch_size: int = 128
    dlrm: DlrmConfig = field(default_factory=DlrmConfig)
    channel_mode: ChannelMode = ChannelMode.ATTESTED
    build_id: str = BUILD_ID
    authority_key: Optional[str] = None
    authority: Optional[Authority] = field(default=None, compare=False, repr=False)
    allowed_measurements: tuple[bytes, ...] = ()
    ps_addr: str = DEFAULT_PS_ADDR
    chief_addr: str = DEFAULT_CHIEF_ADDR
    worker_index: int = 0
    shard_path: Optional[str] = None
    dataset_path: Optional[str] = None
    samples: int = 10_000
    data_seed: int = 0
    precision: str = "float32"
    teacher_noise: float = 0.0
    metrics_out: Optional[str] = None
    export_model: Optional[str] = None
    handshake_timeout: float = DEFAULT_HANDSHAKE_TIMEOUT
    round_timeout: float = 120.0
    log_level: str = "INFO"

    def validate(self) -> "RunConfig":
        if self.num_workers < 1:
            raise ConfigError("num_workers must be at least 1")
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1")
        if self.local_batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not 0 <= self.worker_index < self.num_workers:
            raise ConfigError(f"worker_index {self.worker_index} outside [0, {self.num_workers})")
        for name in ("handshake_timeout", "round_timeout"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be a positive number of seconds")
        if self.mode is Mode.SDT and not self.chief_addr:
            raise ConfigError("SDT mode needs chief_addr")
        if not self.ps_addr:
            raise ConfigError("ps_addr is required")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        self.dlrm.validate()
        return self

    # ----------------------------------------
    # Settings view
    # ----------------------------------------

    def settings(self) -> dict[str, object]:
        """Flat key -> value view; the inverse of `build_config`."""
        d = self.dlrm
        return {
            "mode": self.mode,
            "num_workers": self.num_workers,
            "rounds": self.rounds,
            "batch_size": self.local_batch_size,
            "learning_rate": d.learning_rate,
            "seed": d.seed,
            "num_dense": d.num_dense,
            "num_sparse": d.num_sparse,
            "vocab_sizes": d.vocab_sizes,
            "embed_dim": d.embed_dim,
            "bottom_mlp": d.bottom_mlp_dims,
            "top_mlp": d.top_mlp_dims,
            "precision": self.precision,
            "channel_mode": self.channel_mode,
            "build_id": self.build_id,
            "authority_key": self.authority_key,
            "allowed_measurements": self.allowed_measurements,
            "ps_addr": self.ps_addr,
            "chief_addr": self.chief_addr,
            "worker_index": self.worker_index,
            "shard_path": self.shard_path,
            "dataset_path": self.dataset_path,
            "samples": self.samples,
            "data_seed": self.data_seed,
            "teacher_noise": self.teacher_noise,
            "metrics_out": self.metrics_out,
            "export_model": self.export_model,
            "handshake_timeout": self.handshake_timeout,
            "round_timeout": self.round_timeout,
            "log_level": self.log_level,
        }

    def to_text(self, keys: Optional[Iterable[str]] = None, exclude: Iterable[str] = ()) -> str:
        settings = self.settings()
        chosen = [k for k in (keys if keys is not None else settings) if k not in set(exclude)]
        return "".join(f"{key}={_format(settings[key])}\n" for key in chosen)

    def transfer_text(self) -> str:
        return self.to_text(TRANSFER_KEYS)

    def with_transfer(self, text: str) -> "RunConfig":
        """Adopt the training settings a chief shipped in a ConfigTransfer."""
        received = parse_settings(dotenv_values(stream=io.StringIO(text)), "config transfer")
        stray = set(received) - set(TRANSFER_KEYS)
        if stray:
            raise ConfigError(f"config transfer carries non-training keys: {sorted(stray)}")
        settings = {**self.settings(), **received}
        return replace(build_config(settings), authority=self.authority)

    def effective_digest(self, exclude: Iterable[str] = ()) -> bytes:
        return hashlib.sha256(self.to_text(exclude=exclude).encode("utf-8")).digest()

    # ----------------------------------------
    # Attestation
    # ----------------------------------------

    def manifest(self) -> bytes:
        """Enclave manifest text every node of one deployment shares."""
        return f"mode={self.mode.value}\nnum_workers={self.num_workers}\n".encode("utf-8")

    def measurement(self) -> bytes:
        return measure(self.build_id.encode("utf-8"), self.manifest())

    def require_authority(self) -> Authority:
        if self.authority is not None:
            return self.authority
        if self.authority_key is None:
            raise ConfigError("attested mode needs authority_key (see the keygen subcommand)")
        return Authority.load(self.authority_key)

    def identity(self) -> Optional[EnclaveIdentity]:
        if self.channel_mode is ChannelMode.NATIVE:
            return None
        return EnclaveIdentity(self.measurement(), self.require_authority())

    def policy(self) -> Optional[VerifyPolicy]:
        if self.channel_mode is ChannelMode.NATIVE:
            return None
        allowed = self.allowed_measurements or (self.measurement(),)
        return VerifyPolicy(self.require_authority().public_key, frozenset(allowed))

    def with_authority(self) -> "RunConfig":
        """Resolve authority_key once so every node built from this config shares it."""
        if self.channel_mode is ChannelMode.NATIVE or self.authority is not None:
            return self
        return replace(self, authority=self.require_authority())


# ========================================
# Loading
# ========================================

def parse_settings(raw: Mapping[str, Optional[str]], source: str) -> dict[str, object]:
    settings: dict[str, object] = {}
    for key, value in raw.items():
        name = key.strip().lower()
        if name not in _PARSERS:
            raise ConfigError(f"unknown configuration key {key!r} in {source}")
        text = (value or "").strip()
        try:
            settings[name] = _PARSERS[name](text)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {name} in {source}: {text!r} ({e})") from None
    return settings


def read_config_file(path) -> dict[str, object]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_settings(dotenv_values(path), str(path))


def environment_settings(environ: Mapping[str, str]) -> dict[str, object]:
    raw = {
        name[len(ENV_PREFIX):].lower(): value
        for name, value in environ.items()
        if name.startswith(ENV_PREFIX) and name[len(ENV_PREFIX):].lower() in _PARSERS
    }
    return parse_settings(raw, "environment")


def build_config(settings: Mapping[str, object]) -> RunConfig:
    """Turn a flat settings mapping into a validated RunConfig; missing keys take defaults."""
    base = RunConfig()
    defaults = base.dlrm
    num_sparse = settings.get("num_sparse", defaults.num_sparse)
    if "vocab_sizes" in settings:
        vocab_sizes = settings["vocab_sizes"]
    elif "vocab_size" in settings:
        vocab_sizes = (settings["vocab_size"],) * num_sparse
    elif num_sparse == defaults.num_sparse:
        vocab_sizes = defaults.vocab_sizes
    else:
        vocab_sizes = (defaults.vocab_sizes[0],) * num_sparse

    dlrm = DlrmConfig(
        num_dense=settings.get("num_dense", defaults.num_dense),
        num_sparse=num_sparse,
        vocab_sizes=tuple(vocab_sizes),
        embed_dim=settings.get("embed_dim", defaults.embed_dim),
        bottom_mlp_dims=tuple(settings.get("bottom_mlp", defaults.bottom_mlp_dims)),
        top_mlp_dims=tuple(settings.get("top_mlp", defaults.top_mlp_dims)),
        learning_rate=settings.get("learning_rate", defaults.learning_rate),
        seed=settings.get("seed", defaults.seed),
    )
    renamed = {"batch_size": "local_batch_size"}
    dlrm_keys = {
        "learning_rate", "seed", "num_dense", "num_sparse", "vocab_size",
        "vocab_sizes", "embed_dim", "bottom_mlp", "top_mlp",
    }
    fields = {
        renamed.get(key, key): value
        for key, value in settings.items()
        if key not in dlrm_keys
    }
    for key in ("ps_addr", "chief_addr"):
        if fields.get(key) == "":
            fields.pop(key)
    return replace(base, dlrm=dlrm, **fields).validate()


def load_config(
    path=None,
    environ: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> RunConfig:
    """Defaults < config file < EFL_* environment < overrides."""
    settings: dict[str, object] = {}
    if path is not None:
        settings.update(read_config_file(path))
    if environ is not None:
        settings.update(environment_settings(environ))
    if overrides:
        unknown = set(overrides) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        given = {k: v for k, v in overrides.items() if v is not None}
        settings.update({k: v for k, v in given.items() if not isinstance(v, str)})
        settings.update(parse_settings({k: v for k, v in given.items() if isinstance(v, str)}, "command line"))
    # A uniform vocab_size from a later source replaces an earlier explicit list.
    if overrides and "vocab_size" in overrides and "vocab_sizes" not in overrides:
        settings.pop("vocab_sizes", None)
    config = build_config(settings)
    logger.debug("resolved configuration:\n%s", config.to_text(exclude=("authority_key",)))
    return config
