"""Configuration objects shared across the package.

Both configs are plain dataclasses serialized as JSON; ``from_dict`` accepts
partial dictionaries so CLI ``--config`` files only need to list overrides.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Raised when a configuration violates its documented ranges."""


@dataclass
class SynthConfig:
    """Parameters of the synthetic cohort generator.

    The 20x grid is always exactly twice the 10x grid on each side; only the
    10x dims are stored.
    """

    n_cases: int = 200
    grid_h10: int = 8
    grid_w10: int = 8
    embed_dim: int = 32
    n_tumor_genes: int = 64
    n_tme_genes: int = 64
    latent_dim: int = 4
    noise_sigma: float = 0.5
    seed: int = 0

    @property
    def grid_h20(self) -> int:
        return 2 * self.grid_h10

    @property
    def grid_w20(self) -> int:
        return 2 * self.grid_w10

    @property
    def n_genes(self) -> int:
        return self.n_tumor_genes + self.n_tme_genes

    def validate(self) -> "SynthConfig":
        counts = {
            "n_cases": self.n_cases,
            "grid_h10": self.grid_h10,
            "grid_w10": self.grid_w10,
            "embed_dim": self.embed_dim,
            "n_tumor_genes": self.n_tumor_genes,
            "n_tme_genes": self.n_tme_genes,
            "latent_dim": self.latent_dim,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma!r}")
        return self


@dataclass
class RunConfig:
    """Hyperparameters of one training/evaluation run (one task, one fold)."""

    task: str = "diagnosis"  # diagnosis | grading | survival
    n_folds: int = 3
    fold_index: int = 0
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    # model dims; the teacher's token width fixes the 128-wide subspace
    # representations, the student carries its own (narrower) token width
    # and projects up to the 2*embed_dim distillation target.
    embed_dim: int = 128
    student_dim: int = 32
    n_heads: int = 4
    query_grid: int = 4
    offset_scale: float = 0.5
    # student token aggregation
    n_clusters: int = 8
    knn_k: int = 5
    # cross-scale consistency
    dev_lambda: float = 0.1
    igc_normalize: bool = True
    # distillation
    tau: float = 2.0
    tau_sq_scale: bool = True
    w_task: float = 1.0
    w_mse: float = 1.0
    w_kl: float = 1.0
    # preprocessing
    hvg_fraction: float = 0.30
    val_fraction: float = 0.25
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.task not in ("diagnosis", "grading", "survival"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_folds < 2:
            raise ConfigError(f"n_folds must be >= 2, got {self.n_folds}")
        if not 0 <= self.fold_index < self.n_folds:
            raise ConfigError(f"fold_index {self.fold_index} out of range for {self.n_folds} folds")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.embed_dim < 1 or self.embed_dim % self.n_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} must be a positive multiple of n_heads {self.n_heads}")
        if self.student_dim < 1 or self.student_dim % self.n_heads != 0:
            raise ConfigError(f"student_dim {self.student_dim} must be a positive multiple of n_heads {self.n_heads}")
        if self.query_grid < 1:
            raise ConfigError("query_grid must be >= 1")
        if self.offset_scale < 0:
            raise ConfigError("offset_scale must be >= 0")
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        if self.dev_lambda < 0:
            raise ConfigError("dev_lambda must be >= 0")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        for name in ("w_task", "w_mse", "w_kl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 < self.hvg_fraction <= 1:
            raise ConfigError(f"hvg_fraction must lie in (0, 1], got {self.hvg_fraction}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        return self


def _from_dict(cls, data: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data).validate()


def synth_config_from_dict(data: dict) -> SynthConfig:
    return _from_dict(SynthConfig, data)


def run_config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def load_config_file(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
