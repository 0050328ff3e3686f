"""Model configuration, config-file parsing, and global seeding."""

import random
from dataclasses import dataclass, field, fields, asdict

import numpy as np
import torch

from .errors import ConfigError


@dataclass
class ModelConfig:
    # Architecture
    d: int = 64                  # channel dimension
    layers: int = 4              # encoder depth
    heads: int = 4               # attention heads
    patch_size: int = 8          # patch edge in pixels
    image_hw: int = 64           # square input resolution
    vocab_size: int = 64
    m_max: int = 12              # max text tokens (class token excluded)
    mlp_ratio: int = 4           # expert hidden width multiplier

    # Latent expressions
    n_latent: int = 2                                      # number of generated expressions
    k_list: tuple = (4, 10)                                # attribute tokens per expression
    p_drop_list: tuple = (0.2, 0.15)                       # token-drop probability per expression
    n_concepts: int = 100                                  # concept bank size
    gumbel_temperature: float = 1.0

    # Objectives
    gamma: float = 0.2           # positive margin
    tau: float = 0.07            # contrastive temperature
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5
    mask_threshold: float = 0.35

    # No-target (empty) mode
    gres_enabled: bool = False
    gres_loss_weight: float = 0.5
    empty_logit_threshold: float = 0.0

    seed: int = 0

    # Component switches (ablations + underdetermined details)
    use_latent: bool = True
    use_subject_distributor: bool = True
    use_concept_injector: bool = True
    use_margin: bool = True              # False -> gamma treated as 0
    elementwise_dropout: bool = False    # drop single entries instead of whole token rows
    replace_attributes: bool = False     # overwrite attributes with injected concepts instead of adding
    per_layer_concepts: bool = False     # separate concept bank per encoder layer
    include_text_negatives: bool = False # add other samples' text projections to the negative set
    exclude_same_text_negatives: bool = True  # drop false negatives with identical expressions
    gumbel_hard: bool = True             # straight-through hard selection (soft for gradient checks)
    gumbel_noise: bool = True            # sample selection noise in training mode
    bilinear_mask_resize: bool = False   # bilinear-then-threshold instead of nearest-neighbor

    def __post_init__(self):
        if self.n_latent < 0:
            raise ConfigError("n_latent must be >= 0")
        self.k_list = tuple(int(k) for k in self.k_list)
        self.p_drop_list = tuple(float(p) for p in self.p_drop_list)
        if len(self.k_list) != self.n_latent or len(self.p_drop_list) != self.n_latent:
            raise ConfigError("k_list and p_drop_list must have n_latent entries")
        if any(k < 1 for k in self.k_list):
            raise ConfigError("every k must be >= 1")
        if any(not (0.0 <= p < 1.0) for p in self.p_drop_list):
            raise ConfigError("every drop probability must lie in [0, 1)")
        if self.image_hw % self.patch_size != 0:
            raise ConfigError("image_hw must be divisible by patch_size")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must lie in [0, 1]")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not (0.0 < self.mask_threshold < 1.0):
            raise ConfigError("mask_threshold must lie in (0, 1)")
        if self.d % self.heads != 0:
            raise ConfigError("d must be divisible by heads")
        if self.vocab_size < 1 or self.m_max < 0:
            raise ConfigError("vocab_size must be >= 1 and m_max >= 0")

    @property
    def n_patches(self):
        side = self.image_hw // self.patch_size
        return side * side

    @property
    def grid_hw(self):
        return self.image_hw // self.patch_size

    @property
    def map_hw(self):
        """Spatial size of the fused probability map (quarter resolution)."""
        return self.image_hw // 4

    def to_dict(self):
        d = asdict(self)
        d["k_list"] = list(self.k_list)
        d["p_drop_list"] = list(self.p_drop_list)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _parse_value(name, text, py_type):
    text = text.strip()
    try:
        if py_type is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if py_type is int:
            return int(text)
        if py_type is float:
            return float(text)
        if py_type is tuple:
            if not text:
                return ()
            return tuple(float(v) if "." in v else int(v) for v in text.split(","))
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for '{name}': {text!r}") from exc


def load_config(path):
    """Read a flat `key = value` file (lists comma-separated). Unknown keys are rejected."""
    types = {f.name: f.type for f in fields(ModelConfig)}
    py_types = {"int": int, "float": float, "bool": bool, "tuple": tuple}
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            ann = types[key]
            ann_name = ann if isinstance(ann, str) else getattr(ann, "__name__", "str")
            values[key] = _parse_value(key, val, py_types.get(ann_name, str))
    return ModelConfig.from_dict(values)


def save_config(config, path):
    with open(path, "w") as fh:
        for key, val in config.to_dict().items():
            if isinstance(val, list):
                val = ", ".join(str(v) for v in val)
            fh.write(f"{key} = {val}\n")


def seed_all(seed):
    """Make every subsequent stochastic operation reproducible for equal seeds."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
