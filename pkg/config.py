from __future__ import annotations
import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from dotenv import load_dotenv

# I want logging ready right away, so I'm pulling in env vars first thing.
load_dotenv()
logging.basicConfig(
    level=os.getenv("UBVL_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s [%(levelname)s] %(message)s"
)

log = logging.getLogger(__name__)


def _as_bool(v: str | None, default=False):
    # Tiny helper so I stop rewriting the same truthy checks everywhere.
    if v is None:
        return default
    return str(v).strip().lower() in {"1", "true", "yes", "y", "on"}


# Process knobs, not run settings: these never end up in a checkpoint.
PROGRESS = _as_bool(os.getenv("UBVL_PROGRESS"), False)
PREFETCH = _as_bool(os.getenv("UBVL_PREFETCH"), True)
SELFCHECK_SEEDS = int(os.getenv("UBVL_SELFCHECK_SEEDS", "20"))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # architecture
    embed_dim: int = 32
    width: int = 32
    heads: int = 4
    ffn_mult: int = 4
    proj_hidden: int = 64
    grid_size: int = 4
    sa_layers: int = 4
    speech_layers: int = 2
    shared_layers: int = 2
    n_units: int = 32
    max_seq_len: int = 64
    # masking / swapping / prediction
    mask_prob: float = 0.08
    mask_len: int = 10
    swap_prob: float = 0.15
    tau_pred: float = 0.1
    # objective and training
    tau: float = 0.07
    momentum: float = 0.99
    queue_size: int = 9600
    mode: str = "in_batch"
    topk: int = 1
    batch_size: int = 32
    epochs: int = 30
    lr: float = 0.001
    seed: int = 0
    pred_loss_weight: float = 0.0
    text_weight: float = 0.5
    proj_heads: bool = False
    freeze_language: bool = False
    max_grad_norm: float = 0.0
    checkpoint_every: int = 1
    modality: str = "audio"
    # evaluation
    pool_size: int = 20
    probe_epochs: int = 100
    probe_lr: float = 0.01
    probe_hidden: int = 64
    probe_fraction: float = 1.0
    segment_length: float = 1.0
    gallery: str = "class"
    zero_shot_samples: str = "image"
    # synthetic data
    n_classes: int = 8
    n_pairs: int = 512
    image_size: int = 8
    image_channels: int = 4
    seq_len: int = 16
    audio_dim: int = 8
    noise_sigma: float = 0.1
    holdout: float = 0.25

    def __post_init__(self):
        for key in _CHECKS:
            _check(key, getattr(self, key), "config")
        if self.width % self.heads:
            raise ConfigError(f"config: width={self.width} is not divisible by heads={self.heads}")
        if self.image_size % self.grid_size:
            raise ConfigError(f"config: image_size={self.image_size} is not divisible by grid_size={self.grid_size}")
        if self.mode == "queue" and self.batch_size > self.queue_size:
            raise ConfigError(f"config: batch_size={self.batch_size} does not fit in queue_size={self.queue_size}")
        # fused input needs room for audio plus text positions
        needed = 2 * self.seq_len if self.modality == "fused" else self.seq_len
        if needed > self.max_seq_len:
            raise ConfigError(f"config: max_seq_len={self.max_seq_len} is shorter than {needed} positions")

    def as_dict(self) -> dict[str, object]:
        return dataclasses.asdict(self)


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _probability(v):
    return 0.0 <= v <= 1.0


_CHECKS = {
    "embed_dim": (_positive, "must be > 0"),
    "width": (_positive, "must be > 0"),
    "heads": (_positive, "must be > 0"),
    "ffn_mult": (_positive, "must be > 0"),
    "proj_hidden": (_positive, "must be > 0"),
    "grid_size": (_positive, "must be > 0"),
    "sa_layers": (_non_negative, "must be >= 0"),
    "speech_layers": (_non_negative, "must be >= 0"),
    "shared_layers": (_non_negative, "must be >= 0"),
    "n_units": (_positive, "must be > 0"),
    "max_seq_len": (_positive, "must be > 0"),
    "mask_prob": (_probability, "must be in [0, 1]"),
    "mask_len": (lambda v: v >= 1, "must be >= 1"),
    "swap_prob": (_probability, "must be in [0, 1]"),
    "tau_pred": (_positive, "must be > 0"),
    "tau": (_positive, "must be > 0"),
    "momentum": (_probability, "must be in [0, 1]"),
    "queue_size": (_positive, "must be > 0"),
    "mode": (lambda v: v in ("in_batch", "queue"), "must be in_batch or queue"),
    "topk": (_positive, "must be >= 1"),
    "batch_size": (lambda v: v >= 2, "must be >= 2"),
    "epochs": (_non_negative, "must be >= 0"),
    "lr": (_positive, "must be > 0"),
    "seed": (_non_negative, "must be >= 0"),
    "pred_loss_weight": (_non_negative, "must be >= 0"),
    "text_weight": (_non_negative, "must be >= 0"),
    "max_grad_norm": (_non_negative, "must be >= 0"),
    "checkpoint_every": (_non_negative, "must be >= 0"),
    "modality": (lambda v: v in ("audio", "text", "fused"), "must be audio, text or fused"),
    "pool_size": (_positive, "must be >= 1"),
    "probe_epochs": (_non_negative, "must be >= 0"),
    "probe_lr": (_positive, "must be > 0"),
    "probe_hidden": (_positive, "must be > 0"),
    "probe_fraction": (lambda v: 0.0 < v <= 1.0, "must be in (0, 1]"),
    "segment_length": (_positive, "must be > 0"),
    "gallery": (lambda v: v in ("class", "pairs"), "must be class or pairs"),
    "zero_shot_samples": (lambda v: v in ("image", "audio"), "must be image or audio"),
    "n_classes": (lambda v: v >= 2, "must be >= 2"),
    "n_pairs": (_positive, "must be > 0"),
    "image_size": (_positive, "must be > 0"),
    "image_channels": (_positive, "must be > 0"),
    "seq_len": (_positive, "must be > 0"),
    "audio_dim": (_positive, "must be > 0"),
    "noise_sigma": (_non_negative, "must be >= 0"),
    "holdout": (lambda v: 0.0 <= v < 1.0, "must be in [0, 1)"),
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _check(key: str, value, where: str):
    rule = _CHECKS.get(key)
    if rule and not rule[0](value):
        raise ConfigError(f"{where}: {key}={value!r} {rule[1]}")


def _convert(key: str, raw: str, where: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() not in {"1", "0", "true", "false", "yes", "no", "on", "off", "y", "n"}:
                raise ValueError(raw)
            return _as_bool(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {key}={raw!r} as {kind}") from None


def _parse_line(line: str, where: str) -> tuple[str, object] | None:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    if "=" not in text:
        raise ConfigError(f"{where}: expected key=value, got {line.strip()!r}")
    key, raw = (s.strip() for s in text.split("=", 1))
    if key not in _FIELD_TYPES:
        raise ConfigError(f"{where}: unknown key {key!r}")
    value = _convert(key, raw, where)
    _check(key, value, where)
    return key, value


def parse_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the key=value file at ``path``, then each ``KEY=VALUE`` override."""
    values: dict[str, object] = {}
    if path is not None:
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise OSError(f"could not read config {path}: {e.strerror or e}") from e
        for no, line in enumerate(lines, start=1):
            parsed = _parse_line(line, f"{path}:{no}")
            if parsed:
                values[parsed[0]] = parsed[1]
    for i, item in enumerate(overrides, start=1):
        parsed = _parse_line(item, f"--set #{i}")
        if parsed is None:
            raise ConfigError(f"--set #{i}: empty override")
        values[parsed[0]] = parsed[1]
    cfg = RunConfig(**values)
    log.debug("config: %s", cfg)
    return cfg
