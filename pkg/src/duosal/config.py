"""Model/run configuration: a validated dataclass plus INI round-trip."""

from __future__ import annotations

import configparser
import dataclasses
import io


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    input_hw: tuple = (224, 224)
    branch_channels: tuple = (32, 64, 128, 256)
    blocks_per_stage: tuple = (1, 1, 2, 2)
    attention_heads: int = 4
    window_size: int = 7
    token_dim: int = 128
    triple_it_depth: int = 2
    ffn_ratio: int = 4
    supp_channels: int = 1          # raw channels of the supplementary input
    init_scale: float = 1.0

    def __post_init__(self):
        h, w = self.input_hw
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ConfigError(f"input_hw {self.input_hw} must be positive multiples of 32")
        if len(self.branch_channels) != 4 or any(c < 1 for c in self.branch_channels):
            raise ConfigError("branch_channels needs 4 positive entries")
        if len(self.blocks_per_stage) != 4 or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("blocks_per_stage needs 4 positive entries")
        for c in self.branch_channels:
            if c % self.attention_heads:
                raise ConfigError(
                    f"branch channels {self.branch_channels} must divide by "
                    f"attention_heads={self.attention_heads}")
        if self.token_dim % self.attention_heads:
            raise ConfigError("token_dim must divide by attention_heads")
        if self.token_dim % 4:
            raise ConfigError("token_dim must be a multiple of 4 (sin/cos position pairs)")
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if self.triple_it_depth < 1:
            raise ConfigError("triple_it_depth must be >= 1")
        if self.ffn_ratio < 1:
            raise ConfigError("ffn_ratio must be >= 1")
        if self.supp_channels < 1:
            raise ConfigError("supp_channels must be >= 1")

    def level_hw(self, level):
        """Spatial size of pyramid level 1..4 (strides 4/8/16/32)."""
        s = 4 * (2 ** (level - 1))
        return (self.input_hw[0] // s, self.input_hw[1] // s)

    def canonical_text(self):
        """Stable one-line-per-field rendering; checkpoint identity string."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def parse_canonical(text):
    """Rebuild a ModelConfig from canonical_text() output."""
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"bad canonical config line {line!r}")
        key, raw = line.split("=", 1)
        values[key] = raw
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown canonical config keys {sorted(unknown)}")
    kwargs = {}
    for name, raw in values.items():
        default = fields[name].default
        if isinstance(default, tuple):
            kwargs[name] = tuple(int(p) for p in raw.split(","))
        elif isinstance(default, int):
            kwargs[name] = int(raw)
        else:
            kwargs[name] = float(raw)
    return ModelConfig(**kwargs)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 800
    lr: float = 5e-5
    weight_decay: float = 1e-4
    batch_size: int = 8
    n_samples: int = 8
    modality: str = "depth"
    noise_level: float = 0.05
    supp_corruption: float = 0.0
    primary_corruption: float = 0.0
    n_objects: int = 3
    eval_every: int = 25
    grad_clip: float = 50.0         # global-norm ceiling; <= 0 disables
    target_mae: float = 0.0         # 0 disables early stop
    target_fmeasure: float = 1.0

    def __post_init__(self):
        if self.modality not in ("depth", "thermal", "focal_stack"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.n_samples < 1:
            raise ConfigError("batch_size and n_samples must be >= 1")
        if not (0.0 <= self.supp_corruption <= 1.0):
            raise ConfigError("supp_corruption must lie in [0, 1]")
        if not (0.0 <= self.primary_corruption <= 1.0):
            raise ConfigError("primary_corruption must lie in [0, 1]")


def _get(parser, section, key, cast, fallback):
    if not parser.has_option(section, key):
        return fallback
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {e}") from None


def _int_tuple(raw):
    parts = [p for p in raw.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def load_config(path):
    """Parse an INI file into (ModelConfig, TrainConfig); missing keys default."""
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from None

    for section in parser.sections():
        if section not in ("model", "train", "data"):
            raise ConfigError(f"unknown section [{section}]")

    m = "model"
    hw = _get(parser, m, "input_hw", _int_tuple, (224, 224))
    if len(hw) == 1:
        hw = (hw[0], hw[0])
    if len(hw) != 2:
        raise ConfigError(f"input_hw needs 1 or 2 integers, got {hw}")
    model = ModelConfig(
        input_hw=hw,
        branch_channels=_get(parser, m, "branch_channels", _int_tuple, (32, 64, 128, 256)),
        blocks_per_stage=_get(parser, m, "blocks_per_stage", _int_tuple, (1, 1, 2, 2)),
        attention_heads=_get(parser, m, "attention_heads", int, 4),
        window_size=_get(parser, m, "window_size", int, 7),
        token_dim=_get(parser, m, "token_dim", int, 128),
        triple_it_depth=_get(parser, m, "triple_it_depth", int, 2),
        ffn_ratio=_get(parser, m, "ffn_ratio", int, 4),
        supp_channels=_get(parser, m, "supp_channels", int, 1),
        init_scale=_get(parser, m, "init_scale", float, 1.0),
    )

    train = TrainConfig(
        seed=_get(parser, "train", "seed", int, 0),
        steps=_get(parser, "train", "steps", int, 800),
        lr=_get(parser, "train", "lr", float, 5e-5),
        weight_decay=_get(parser, "train", "weight_decay", float, 1e-4),
        batch_size=_get(parser, "train", "batch_size", int, 8),
        eval_every=_get(parser, "train", "eval_every", int, 25),
        grad_clip=_get(parser, "train", "grad_clip", float, 50.0),
        target_mae=_get(parser, "train", "target_mae", float, 0.0),
        target_fmeasure=_get(parser, "train", "target_fmeasure", float, 1.0),
        n_samples=_get(parser, "data", "n_samples", int, 8),
        modality=_get(parser, "data", "modality", str, "depth"),
        noise_level=_get(parser, "data", "noise_level", float, 0.05),
        supp_corruption=_get(parser, "data", "supp_corruption", float, 0.0),
        primary_corruption=_get(parser, "data", "primary_corruption", float, 0.0),
        n_objects=_get(parser, "data", "n_objects", int, 3),
    )
    return model, train


def dump_config(model, train=None):
    """Inverse of load_config, for writing run artifacts."""
    parser = configparser.ConfigParser()
    parser["model"] = {
        "input_hw": f"{model.input_hw[0]},{model.input_hw[1]}",
        "branch_channels": ",".join(str(c) for c in model.branch_channels),
        "blocks_per_stage": ",".join(str(b) for b in model.blocks_per_stage),
        "attention_heads": str(model.attention_heads),
        "window_size": str(model.window_size),
        "token_dim": str(model.token_dim),
        "triple_it_depth": str(model.triple_it_depth),
        "ffn_ratio": str(model.ffn_ratio),
        "supp_channels": str(model.supp_channels),
        "init_scale": str(model.init_scale),
    }
    if train is not None:
        parser["train"] = {
            "seed": str(train.seed),
            "steps": str(train.steps),
            "lr": str(train.lr),
            "weight_decay": str(train.weight_decay),
            "batch_size": str(train.batch_size),
            "eval_every": str(train.eval_every),
            "grad_clip": str(train.grad_clip),
            "target_mae": str(train.target_mae),
            "target_fmeasure": str(train.target_fmeasure),
        }
        parser["data"] = {
            "n_samples": str(train.n_samples),
            "modality": train.modality,
            "noise_level": str(train.noise_level),
            "supp_corruption": str(train.supp_corruption),
            "primary_corruption": str(train.primary_corruption),
            "n_objects": str(train.n_objects),
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
