"""Run configuration: one serializable object drives data generation,
training, evaluation and the ablation switches."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .diffusion import LossWeights, TrainSettings
from .encoders import EncoderConfig
from .synth import ArchSpec, PerturbSpec


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


LOSS_COMPONENTS = ("cd", "diff", "pos")


@dataclass
class RunConfig:
    """Everything a run needs; a run is reproducible from this plus nothing."""

    # data
    data_dir: str = ""
    n_patients: int = 50
    test_fraction: float = 0.1
    arch: ArchSpec = field(default_factory=ArchSpec)
    perturb: PerturbSpec = field(default_factory=PerturbSpec)
    # encoders
    d_local: int = 256
    d_global: int = 256
    local_blocks: int = 4
    prop_blocks: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    points_per_tooth: int = 128
    mask_ratio: float = 0.75
    mae_decoder_dim: int = 128
    mae_decoder_blocks: int = 2
    mae_epochs: int = 0  # optional pretraining stage inside `train`
    sa_npoints: Tuple[int, int] = (256, 64)
    sa_radii: Tuple[float, float] = (5.0, 12.0)
    sa_nsamples: Tuple[int, int] = (32, 32)
    # diffusion
    timesteps: int = 1000
    sample_steps: int = 50
    denoiser_blocks: int = 6
    denoiser_dim: int = 256
    # optimization
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    lambda_cd: float = 0.05
    lambda_diff: float = 0.5
    lambda_pos: float = 1.0
    # ablations
    no_mae: bool = False  # point-based local encoder instead of the mesh one
    no_global: bool = False
    no_fp: bool = False
    no_dpm: bool = False  # direct regression head instead of the diffusion model
    loss_mask: str = "cd,diff,pos"  # which loss components stay active
    # seeds
    seed: int = 0

    def __post_init__(self):
        active = self.active_losses()
        unknown = active - set(LOSS_COMPONENTS)
        if unknown:
            raise ConfigError(
                f"unknown loss components {sorted(unknown)}; pick from {LOSS_COMPONENTS}"
            )
        if self.timesteps % self.sample_steps != 0 or self.sample_steps > self.timesteps:
            raise ConfigError(
                f"sample_steps {self.sample_steps} must divide timesteps {self.timesteps}"
            )
        if self.n_patients < 1:
            raise ConfigError("n_patients must be at least 1")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")

    def active_losses(self) -> set:
        return {p.strip() for p in self.loss_mask.split(",") if p.strip()}

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            d_local=self.d_local,
            d_global=self.d_global,
            local_blocks=self.local_blocks,
            prop_blocks=self.prop_blocks,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            points_per_tooth=self.points_per_tooth,
            mask_ratio=self.mask_ratio,
            mae_decoder_dim=self.mae_decoder_dim,
            mae_decoder_blocks=self.mae_decoder_blocks,
            sa_npoints=tuple(self.sa_npoints),
            sa_radii=tuple(self.sa_radii),
            sa_nsamples=tuple(self.sa_nsamples),
            use_global=not self.no_global,
            use_propagation=not self.no_fp,
            point_local=self.no_mae,
        )

    def loss_weights(self) -> LossWeights:
        active = self.active_losses()
        return LossWeights(
            chamfer=self.lambda_cd if "cd" in active else 0.0,
            diffusion=self.lambda_diff if "diff" in active else 0.0,
            position=self.lambda_pos if "pos" in active else 0.0,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            timesteps=self.timesteps,
            denoiser_blocks=self.denoiser_blocks,
            denoiser_dim=self.denoiser_dim,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            weights=self.loss_weights(),
            use_diffusion=not self.no_dpm,
            seed=self.seed,
        )


def paper_scale(config: Optional[RunConfig] = None) -> RunConfig:
    """Profile with the published training scale (for capable hardware)."""
    config = config or RunConfig()
    return dataclasses.replace(
        config,
        epochs=500,
        local_blocks=12,
        denoiser_blocks=12,
        mlp_ratio=4.0,
    )


def to_json(config: RunConfig) -> str:
    payload = dataclasses.asdict(config)
    payload["arch"]["tooth_scale_range"] = list(config.arch.tooth_scale_range)
    payload["sa_npoints"] = list(config.sa_npoints)
    payload["sa_radii"] = list(config.sa_radii)
    payload["sa_nsamples"] = list(config.sa_nsamples)
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def from_json(text: str) -> RunConfig:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        if "arch" in payload:
            arch = dict(payload["arch"])
            if "tooth_scale_range" in arch:
                arch["tooth_scale_range"] = tuple(arch["tooth_scale_range"])
            payload["arch"] = ArchSpec(**arch)
        if "perturb" in payload:
            payload["perturb"] = PerturbSpec(**payload["perturb"])
        for key in ("sa_npoints", "sa_radii", "sa_nsamples"):
            if key in payload:
                payload[key] = tuple(payload[key])
        return RunConfig(**payload)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return from_json(path.read_text())
