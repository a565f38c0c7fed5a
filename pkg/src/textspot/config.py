"""Model and run configuration with strict JSON loading."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

DEFAULT_ALPHABET = "ABCDEFGHIJ"


def _strict_kwargs(cls, data: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
    return data


@dataclass
class ModelConfig:
    """Architecture hyperparameters (desk-scale defaults)."""

    d_model: int = 64
    heads: int = 8
    points: int = 4            # sampling points K per head per level
    levels: int = 3            # feature levels L (strides 8/16/32)
    enc_layers: int = 6
    dec_layers: int = 6
    ffn_dim: int = 256
    num_queries: int = 100     # composite queries Q
    num_ctrl_points: int = 16  # N: 16 polygon vertices or 8 bezier points
    max_text_len: int = 25     # character slots M
    alphabet: str = DEFAULT_ALPHABET
    mode: str = "polygon"      # polygon | bezier
    box_guidance: bool = True
    multi_scale: bool = True
    aux_loss: bool = False     # per-layer decoder supervision (off by default)

    def __post_init__(self):
        if self.mode not in ("polygon", "bezier"):
            raise ValueError(f"mode must be polygon|bezier, got '{self.mode}'")
        if not self.multi_scale:
            self.levels = 1
        if self.d_model % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 for 2-D encodings")
        if self.levels < 1:
            raise ValueError("need at least one feature level")
        expected_n = 16 if self.mode == "polygon" else 8
        if self.num_ctrl_points != expected_n:
            raise ValueError(
                f"{self.mode} mode uses {expected_n} control points, "
                f"got {self.num_ctrl_points}")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet has duplicate symbols")

    @property
    def n_classes(self):
        """Character classes: alphabet plus PAD."""
        return len(self.alphabet) + 1

    @property
    def pad_index(self):
        return len(self.alphabet)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        return cls(**_strict_kwargs(cls, dict(data), "model config"))

    @classmethod
    def for_mode(cls, mode: str, **kwargs):
        kwargs.setdefault("num_ctrl_points", 16 if mode == "polygon" else 8)
        return cls(mode=mode, **kwargs)


@dataclass
class TrainConfig:
    """Optimizer and schedule settings."""

    iterations: int = 20_000
    base_lr: float = 1e-4
    lr_decay_iteration: int = 16_000  # lr multiplied by 0.1 here
    lr_decay_factor: float = 0.1
    slow_group_scale: float = 0.1     # backbone + sampling/reference projections
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    checkpoint_every: int = 1000
    log_every: int = 50
    seed: int = 0
    resize_range: tuple = (0.75, 1.25)
    augment: bool = True

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["resize_range"] = list(self.resize_range)
        return d

    @classmethod
    def from_dict(cls, data: dict):
        data = _strict_kwargs(cls, dict(data), "train config")
        if "resize_range" in data:
            data["resize_range"] = tuple(data["resize_range"])
        return cls(**data)


@dataclass
class RunConfig:
    """One training/evaluation run: model + schedule + paths + floors."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset_dir: str = ""
    out_dir: str = "runs/default"
    eval_floors: dict = field(default_factory=dict)  # e.g. {"detection_f": 0.8}

    def effective_lr(self):
        """Bezier mode doubles the base learning rate."""
        lr = self.train.base_lr
        return 2.0 * lr if self.model.mode == "bezier" else lr

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "dataset_dir": self.dataset_dir,
            "out_dir": self.out_dir,
            "eval_floors": self.eval_floors,
        }

    @classmethod
    def from_dict(cls, data: dict):
        data = _strict_kwargs(cls, dict(data), "run config")
        return cls(
            model=ModelConfig.from_dict(data.get("model", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            dataset_dir=data.get("dataset_dir", ""),
            out_dir=data.get("out_dir", "runs/default"),
            eval_floors=dict(data.get("eval_floors", {})),
        )

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
