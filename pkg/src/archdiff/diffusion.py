"""Conditional denoising diffusion over stacked per-tooth 6-DoF parameters.

The denoiser predicts the clean parameter matrix (x0-parameterization); the
sampler is fully determinative (no noise injection) with a uniform stride.
Training optimizes the weighted sum of a per-tooth chamfer reconstruction
loss, the squared parameter error, and a relative tooth-position loss, with
the conditioning encoders fine-tuned jointly.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .encoders import (
    ConditionEncoder,
    EncoderConfig,
    EncoderInputs,
    PointGrouping,
    TransformerBlock,
    canonical_point_order,
    compute_grouping,
    jaw_point_cloud,
    patch_feature_tensor,
)
from .geometry import (
    GeometryError,
    JawModel,
    ToothLabel,
    TransformParams,
    canonicalize_axis_angle,
)
from .synth import DatasetRecord

# ---------------------------------------------------------------------------
# Noise schedule


class NumericalError(ArithmeticError):
    """Training or sampling produced non-finite values."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule stored as alpha_bar over t = 0..T."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 2:
            raise GeometryError("alpha_bar must be a 1-D array over t=0..T")
        if ab[0] != 1.0:
            raise GeometryError("alpha_bar[0] must be exactly 1")
        if (np.diff(ab) >= 0).any():
            raise GeometryError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0 or ab[-1] >= 1e-3:
            raise GeometryError("alpha_bar[T] must lie in (0, 1e-3)")
        ab = ab.copy()
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def timesteps(self) -> int:
        return len(self.alpha_bar) - 1

    def alpha(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def sigma(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    @classmethod
    def cosine(cls, timesteps: int = 1000, s: float = 0.008) -> "NoiseSchedule":
        t = np.arange(timesteps + 1, dtype=np.float64)
        f = np.cos((t / timesteps + s) / (1.0 + s) * np.pi / 2.0) ** 2
        return cls(f / f[0])


def _check_t(sched: NoiseSchedule, t: int) -> None:
    if not 0 <= t <= sched.timesteps:
        raise GeometryError(f"timestep {t} outside [0, {sched.timesteps}]")


def forward_diffuse(z0, t: int, eps, sched: NoiseSchedule):
    """z_t = alpha_t * z0 + sigma_t * eps (works on numpy or torch arrays)."""
    _check_t(sched, t)
    return sched.alpha(t) * z0 + sched.sigma(t) * eps


def ddim_step(zt, z0_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """One determinative denoising step from t to t_prev at fixed z0_hat."""
    _check_t(sched, t)
    if not 0 <= t_prev < t:
        raise GeometryError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    ab_t = sched.alpha_bar[t]
    ab_p = sched.alpha_bar[t_prev]
    eps_dir = (zt - math.sqrt(ab_t) * z0_hat) / math.sqrt(1.0 - ab_t)
    return math.sqrt(ab_p) * z0_hat + math.sqrt(1.0 - ab_p) * eps_dir


# ---------------------------------------------------------------------------
# Networks


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal timestep embedding, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class PoseTransformer(nn.Module):
    """Transformer over tooth tokens mapping conditioning (and optionally a
    noisy parameter matrix plus timestep) to 6-DoF outputs per tooth.

    The raw mm tooth-center columns inside the condition are shrunk by
    coord_scale before the input projection so that every input column is
    O(1); the condition itself is left untouched.
    """

    N_LABEL_SLOTS = 32  # FDI grid: 4 quadrants x 8 positions

    def __init__(
        self,
        cond_dim: int,
        d_model: int = 256,
        blocks: int = 6,
        heads: int = 4,
        mlp_ratio: float = 2.0,
        with_time: bool = True,
        t_embed_dim: int = 128,
        center_slice: Optional[Tuple[int, int]] = None,
        coord_scale: float = 1.0,
    ):
        super().__init__()
        self.with_time = with_time
        in_dim = cond_dim + (6 if with_time else 0)
        self.in_proj = nn.Linear(in_dim, d_model)
        if with_time:
            self.time_mlp = nn.Sequential(
                nn.Linear(t_embed_dim, d_model), nn.SiLU(), nn.Linear(d_model, d_model)
            )
        self.t_embed_dim = t_embed_dim
        self.center_slice = center_slice
        self.coord_scale = coord_scale
        self.label_embed = nn.Embedding(self.N_LABEL_SLOTS, d_model)
        self.blocks = nn.ModuleList(
            TransformerBlock(d_model, heads, mlp_ratio) for _ in range(blocks)
        )
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, 6)
        # small-scale head init: the untrained model predicts near-zero
        # movement, keeping early sampling trajectories close to the input pose
        with torch.no_grad():
            self.head.weight.mul_(0.05)
            nn.init.zeros_(self.head.bias)

    def _normalized(self, cond: torch.Tensor) -> torch.Tensor:
        if self.center_slice is None or self.coord_scale == 1.0:
            return cond
        lo, hi = self.center_slice
        cond = cond.clone()
        cond[..., lo:hi] = cond[..., lo:hi] * self.coord_scale
        return cond

    def forward(
        self,
        cond: torch.Tensor,
        z_t: Optional[torch.Tensor] = None,
        t: Optional[torch.Tensor] = None,
        padding_mask: Optional[torch.Tensor] = None,
        label_idx: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """label_idx: optional (B, K) long tensor of FDI slot indices; tokens
        then carry an identity embedding in addition to the condition row."""
        cond = self._normalized(cond)
        if self.with_time:
            if z_t is None or t is None:
                raise GeometryError("denoiser needs z_t and t")
            if z_t.shape[:-1] != cond.shape[:-1] or z_t.shape[-1] != 6:
                raise GeometryError(
                    f"z_t shape {tuple(z_t.shape)} inconsistent with condition "
                    f"{tuple(cond.shape)}"
                )
            x = self.in_proj(torch.cat([z_t, cond], dim=-1))
            temb = self.time_mlp(sinusoidal_embedding(t.to(x.dtype), self.t_embed_dim))
            x = x + temb[:, None, :]
        else:
            x = self.in_proj(cond)
        if label_idx is not None:
            x = x + self.label_embed(label_idx)
        for blk in self.blocks:
            x = blk(x, padding_mask)
        return self.head(self.norm(x))


def _center_slice(enc_config: EncoderConfig) -> Tuple[int, int]:
    start = enc_config.d_global if enc_config.use_global else 0
    return (start, start + 3)


def make_denoiser(enc_config: EncoderConfig, d_model=256, blocks=6, heads=4, mlp_ratio=2.0):
    return PoseTransformer(
        enc_config.cond_dim, d_model, blocks, heads, mlp_ratio, with_time=True,
        center_slice=_center_slice(enc_config), coord_scale=enc_config.coord_scale,
    )


def make_regressor(enc_config: EncoderConfig, d_model=256, blocks=6, heads=4, mlp_ratio=2.0):
    return PoseTransformer(
        enc_config.cond_dim, d_model, blocks, heads, mlp_ratio, with_time=False,
        center_slice=_center_slice(enc_config), coord_scale=enc_config.coord_scale,
    )


# ---------------------------------------------------------------------------
# Differentiable alignment and losses


def so3_exp_t(r: torch.Tensor) -> torch.Tensor:
    """Batched Rodrigues map (..., 3) -> (..., 3, 3) with safe small-angle series."""
    sq = (r * r).sum(dim=-1)
    small = sq < 1e-12
    sq_safe = torch.where(small, torch.ones_like(sq), sq)
    theta = torch.sqrt(sq_safe)
    a = torch.where(small, 1.0 - sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - sq / 24.0, (1.0 - torch.cos(theta)) / sq_safe)
    zeros = torch.zeros_like(sq)
    rx, ry, rz = r[..., 0], r[..., 1], r[..., 2]
    omega = torch.stack(
        [
            torch.stack([zeros, -rz, ry], dim=-1),
            torch.stack([rz, zeros, -rx], dim=-1),
            torch.stack([-ry, rx, zeros], dim=-1),
        ],
        dim=-2,
    )
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand(omega.shape)
    return eye + a[..., None, None] * omega + b[..., None, None] * (omega @ omega)


def align_vertices(verts: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Apply per-tooth transforms about each tooth's own vertex centroid.

    verts: (..., K, V, 3), z: (..., K, 6) -> transformed (..., K, V, 3).
    """
    pivot = verts.mean(dim=-2, keepdim=True)
    R = so3_exp_t(z[..., 3:])
    m = z[..., :3].unsqueeze(-2)
    return (verts - pivot) @ R.transpose(-1, -2) + pivot + m


def chamfer_terms_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-tooth symmetric mean squared nearest-neighbour distance, (K,).

    a, b: (K, V, 3). Correspondences are recomputed on every forward pass but
    enter the backward pass as fixed index selections (subgradient of the
    nearest-neighbour distance), so the search itself runs without autograd.
    """
    with torch.no_grad():
        d = torch.cdist(a, b)
        idx_ab = d.argmin(dim=2)
        idx_ba = d.argmin(dim=1)
    nn_ab = b.gather(1, idx_ab[..., None].expand(-1, -1, 3))
    nn_ba = a.gather(1, idx_ba[..., None].expand(-1, -1, 3))
    fwd = ((a - nn_ab) ** 2).sum(dim=-1).mean(dim=1)
    bwd = ((b - nn_ba) ** 2).sum(dim=-1).mean(dim=1)
    return fwd + bwd


def chamfer_sum_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sum over teeth of the symmetric chamfer distance; a, b: (K, V, 3)."""
    return chamfer_terms_t(a, b).sum()


def center_distance_matrix_t(centers: torch.Tensor) -> torch.Tensor:
    """(K, 3) -> (K, K) matrix of L1 center distances."""
    return (centers[:, None, :] - centers[None, :, :]).abs().sum(dim=-1)


@dataclass(frozen=True)
class LossWeights:
    chamfer: float = 0.05
    diffusion: float = 0.5
    position: float = 1.0

    def __post_init__(self):
        if min(self.chamfer, self.diffusion, self.position) < 0:
            raise GeometryError("loss weights must be non-negative")


def composite_loss_t(
    input_verts: torch.Tensor,
    gt_verts: torch.Tensor,
    z0: torch.Tensor,
    z0_hat: torch.Tensor,
    weights: LossWeights,
) -> Dict[str, torch.Tensor]:
    """Weighted loss for one record: chamfer + parameter error + positions.

    input_verts/gt_verts: (K, V, 3); z0/z0_hat: (K, 6).
    """
    if z0_hat.shape != z0.shape:
        raise GeometryError(f"z0_hat shape {tuple(z0_hat.shape)} != {tuple(z0.shape)}")
    aligned = align_vertices(input_verts, z0_hat)
    l_cd = chamfer_sum_t(aligned, gt_verts)
    l_diff = ((z0 - z0_hat) ** 2).sum()
    d_pred = center_distance_matrix_t(aligned.mean(dim=-2))
    d_gt = center_distance_matrix_t(gt_verts.mean(dim=-2))
    l_pos = ((d_pred - d_gt) ** 2).sum()
    total = weights.chamfer * l_cd + weights.diffusion * l_diff + weights.position * l_pos
    return {"total": total, "cd": l_cd, "diff": l_diff, "pos": l_pos}


def _zero(like: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=like.dtype)


def composite_loss_batch(
    input_verts: torch.Tensor,
    gt_verts: torch.Tensor,
    z0: torch.Tensor,
    z0_hat: torch.Tensor,
    weights: LossWeights,
) -> Dict[str, torch.Tensor]:
    """Batched composite loss, mean over records: tensors are (B, K, V, 3) /
    (B, K, 6). Same math as composite_loss_t, vectorized across the batch.
    Terms whose weight is zero are skipped and reported as 0."""
    b, k, v, _ = input_verts.shape
    need_align = weights.chamfer > 0 or weights.position > 0
    aligned = align_vertices(input_verts, z0_hat) if need_align else None
    if weights.chamfer > 0:
        per_tooth = chamfer_terms_t(
            aligned.reshape(b * k, v, 3), gt_verts.reshape(b * k, v, 3)
        )
        l_cd = per_tooth.reshape(b, k).sum(dim=1).mean()
    else:
        l_cd = _zero(z0_hat)
    l_diff = (
        ((z0 - z0_hat) ** 2).sum(dim=(1, 2)).mean()
        if weights.diffusion > 0
        else _zero(z0_hat)
    )
    if weights.position > 0:
        ca = aligned.mean(dim=2)
        cg = gt_verts.mean(dim=2)
        da = (ca[:, :, None, :] - ca[:, None, :, :]).abs().sum(dim=-1)
        dg = (cg[:, :, None, :] - cg[:, None, :, :]).abs().sum(dim=-1)
        l_pos = ((da - dg) ** 2).sum(dim=(1, 2)).mean()
    else:
        l_pos = _zero(z0_hat)
    total = weights.chamfer * l_cd + weights.diffusion * l_diff + weights.position * l_pos
    return {"total": total, "cd": l_cd, "diff": l_diff, "pos": l_pos}


def composite_loss(
    record: DatasetRecord, z0_hat: np.ndarray, weights: LossWeights = LossWeights()
) -> Dict[str, float]:
    """Record-level convenience wrapper returning plain floats."""
    labels = record.gt.labels
    inp = torch.from_numpy(
        np.stack([record.input.teeth[k].vertices for k in labels])
    )
    gt = torch.from_numpy(np.stack([record.gt.teeth[k].vertices for k in labels]))
    z0 = torch.from_numpy(record.z0.stacked())
    zh = torch.as_tensor(np.asarray(z0_hat, dtype=np.float64))
    out = composite_loss_t(inp, gt, z0, zh, weights)
    return {k: float(v) for k, v in out.items()}


# ---------------------------------------------------------------------------
# Sampling


def sample_transforms(
    denoiser: PoseTransformer,
    cond: torch.Tensor,
    sched: NoiseSchedule,
    n_steps: int,
    seed: int,
    padding_mask: Optional[torch.Tensor] = None,
    label_idx: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Determinative sampling loop: (B, K, D) condition -> (B, K, 6) parameters."""
    T = sched.timesteps
    if n_steps > T:
        raise GeometryError(f"n_steps {n_steps} exceeds schedule length {T}")
    if T % n_steps != 0:
        raise GeometryError(f"n_steps {n_steps} must divide the schedule length {T}")
    stride = T // n_steps
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(*cond.shape[:-1], 6, generator=gen, dtype=cond.dtype)
    denoiser.eval()
    with torch.no_grad():
        for t in range(T, 0, -stride):
            t_tensor = torch.full((cond.shape[0],), float(t), dtype=cond.dtype)
            z0_hat = denoiser(cond, z, t_tensor, padding_mask, label_idx)
            z = ddim_step(z, z0_hat, t, t - stride, sched)
    return z


def params_from_matrix(labels: Sequence[ToothLabel], z: np.ndarray) -> TransformParams:
    """Stacked matrix -> TransformParams with canonical axis-angle range."""
    z = np.asarray(z, dtype=np.float64).copy()
    for i in range(len(z)):
        z[i, 3:] = canonicalize_axis_angle(z[i, 3:])
    return TransformParams.from_stacked(labels, z)


# ---------------------------------------------------------------------------
# Training corpus (tensorized records)


def _record_seed(record_id: str) -> int:
    return zlib.crc32(record_id.encode()) & 0x7FFFFFFF


def label_slots(labels: Sequence[ToothLabel]) -> torch.Tensor:
    """FDI labels -> dense embedding slots (quadrant-1)*8 + position-1."""
    return torch.tensor(
        [(l.quadrant - 1) * 8 + (l.position - 1) for l in labels], dtype=torch.long
    )


@dataclass
class RecordTensors:
    record_id: str
    patient_id: str
    labels: List[ToothLabel]
    input_verts: torch.Tensor  # (K, V, 3) float32
    gt_verts: torch.Tensor  # (K, V, 3) float32
    z0: torch.Tensor  # (K, 6) float32
    cloud: torch.Tensor  # (N, 3) canonical jaw point cloud (empty if unused)
    grouping: Optional[PointGrouping]
    tooth_points: Optional[torch.Tensor] = None  # (K, N, 3) for point_local

    @property
    def label_idx(self) -> torch.Tensor:
        return label_slots(self.labels)


class TrainingCorpus:
    """Uniform-topology record set prepared for batched training.

    All teeth must share one face/patch layout (true for every dataset this
    package generates); the shared topology lets whole batches run through the
    encoders as single tensors.
    """

    def __init__(self, faces: torch.Tensor, hierarchy: torch.Tensor,
                 train: List[RecordTensors], test: List[DatasetRecord],
                 enc_config: EncoderConfig):
        self.faces = faces
        self.hierarchy = hierarchy
        self.train = train
        self.test = test
        self.enc_config = enc_config

    @classmethod
    def from_records(
        cls,
        records: Iterable[Tuple[DatasetRecord, str]],
        enc_config: EncoderConfig,
    ) -> "TrainingCorpus":
        faces = hierarchy = None
        train: List[RecordTensors] = []
        test: List[DatasetRecord] = []
        for record, split in records:
            if split == "test":
                test.append(record)
                continue
            first = record.gt.teeth[record.gt.labels[0]]
            if faces is None:
                if first.patch_hierarchy is None:
                    raise GeometryError("training records need patch hierarchies")
                faces = torch.from_numpy(np.array(first.faces))
                hierarchy = torch.from_numpy(np.array(first.patch_hierarchy))
            train.append(record_tensors(record, enc_config))
        if not train:
            raise GeometryError("empty training split")
        return cls(faces, hierarchy, train, test, enc_config)


def record_tensors(record: DatasetRecord, enc_config: EncoderConfig) -> RecordTensors:
    labels = record.gt.labels
    ref_faces = record.gt.teeth[labels[0]].faces
    for jaw in (record.gt, record.input):
        for k in labels:
            if not np.array_equal(jaw.teeth[k].faces, ref_faces):
                raise GeometryError(
                    "training requires a shared tooth topology across the corpus"
                )
    inp = torch.from_numpy(
        np.stack([record.input.teeth[k].vertices for k in labels])
    ).float()
    gt = torch.from_numpy(np.stack([record.gt.teeth[k].vertices for k in labels])).float()
    z0 = torch.from_numpy(record.z0.stacked()).float()
    seed = _record_seed(record.record_id)
    cloud = torch.zeros(0, 3)
    grouping = None
    tooth_points = None
    if enc_config.use_global:
        cloud = canonical_point_order(
            torch.from_numpy(
                jaw_point_cloud(record.input, enc_config.points_per_tooth, seed)
            ).float()
        )
        grouping = compute_grouping(cloud, enc_config)
    if enc_config.point_local:
        from .geometry import sample_points

        pts = [
            sample_points(record.input.teeth[k], enc_config.points_per_tooth, seed + 1 + i)
            for i, k in enumerate(labels)
        ]
        tooth_points = torch.from_numpy(np.stack(pts)).float()
    return RecordTensors(
        record_id=record.record_id,
        patient_id=record.patient_id,
        labels=list(labels),
        input_verts=inp,
        gt_verts=gt,
        z0=z0,
        cloud=cloud,
        grouping=grouping,
        tooth_points=tooth_points,
    )


def batch_encoder_inputs(
    batch: List[RecordTensors], faces: torch.Tensor, hierarchy: torch.Tensor,
    enc_config: EncoderConfig,
) -> EncoderInputs:
    """Collate record tensors; patch features are recomputed from vertices."""
    k = batch[0].input_verts.shape[0]
    if any(r.input_verts.shape[0] != k for r in batch):
        raise GeometryError("batch with mixed tooth counts; collate per jaw size")
    verts = torch.stack([r.input_verts for r in batch])  # (B, K, V, 3)
    b = len(batch)
    if enc_config.point_local:
        feats = torch.zeros(b, k, 0, enc_config.patch_faces * 15)
        centers = torch.zeros(b, k, 0, 3)
        tooth_points = torch.stack([r.tooth_points for r in batch])
    else:
        flat = verts.reshape(b * k, *verts.shape[2:])
        pf, pc = patch_feature_tensor(flat, faces, hierarchy)
        feats = pf.reshape(b, k, *pf.shape[1:])
        centers = pc.reshape(b, k, *pc.shape[1:])
        tooth_points = None
    return EncoderInputs(
        patch_feats=feats,
        patch_centers=centers,
        tooth_centers=verts.mean(dim=2),
        tooth_mask=torch.ones(b, k, dtype=torch.bool),
        clouds=[r.cloud for r in batch],
        groupings=[r.grouping for r in batch],
        tooth_points=tooth_points,
    )


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainedModel:
    encoder: ConditionEncoder
    model: PoseTransformer
    schedule: NoiseSchedule
    enc_config: EncoderConfig
    use_diffusion: bool
    tag: str
    loss_history: List[Dict[str, float]] = field(default_factory=list)


def architecture_tag(enc_config: EncoderConfig, use_diffusion: bool) -> str:
    parts = [
        "point-local" if enc_config.point_local else "mesh-local",
        "global" if enc_config.use_global else "no-global",
        "fp" if enc_config.use_propagation else "no-fp",
        "dpm" if use_diffusion else "regression",
    ]
    return "+".join(parts)


@dataclass
class TrainSettings:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    timesteps: int = 1000
    denoiser_blocks: int = 6
    denoiser_dim: int = 256
    heads: int = 4
    mlp_ratio: float = 2.0
    weights: LossWeights = field(default_factory=LossWeights)
    use_diffusion: bool = True
    seed: int = 0


def build_models(
    enc_config: EncoderConfig, settings: TrainSettings,
    pretrained_local: Optional[Dict[str, torch.Tensor]] = None,
) -> Tuple[ConditionEncoder, PoseTransformer]:
    torch.manual_seed(settings.seed)
    encoder = ConditionEncoder(enc_config)
    maker = make_denoiser if settings.use_diffusion else make_regressor
    model = maker(
        enc_config,
        d_model=settings.denoiser_dim,
        blocks=settings.denoiser_blocks,
        heads=settings.heads,
        mlp_ratio=settings.mlp_ratio,
    )
    if pretrained_local is not None:
        if enc_config.point_local:
            raise GeometryError("pretrained mesh-encoder weights need the mesh local encoder")
        encoder.local.load_state_dict(pretrained_local)
    return encoder, model


def train_model(
    corpus: TrainingCorpus,
    settings: TrainSettings,
    pretrained_local: Optional[Dict[str, torch.Tensor]] = None,
    log: Optional[Callable[[str], None]] = None,
    checkpoint_path: Optional[Path] = None,
    checkpoint_every: int = 1,
    resume: bool = False,
) -> TrainedModel:
    """Run the training loop (optimizer steps over shuffled record batches).

    Per step: draw a timestep and Gaussian noise per record, corrupt z0, ask
    the denoiser for the clean matrix, align the input meshes with the
    prediction, and descend on the weighted composite loss. With
    use_diffusion=False the network regresses parameters directly from the
    condition and the same loss applies.
    """
    if not corpus.train:
        raise GeometryError("empty training split")
    enc_config = corpus.enc_config
    sched = NoiseSchedule.cosine(settings.timesteps)
    encoder, model = build_models(enc_config, settings, pretrained_local)
    params = list(encoder.parameters()) + list(model.parameters())
    opt = torch.optim.AdamW(params, lr=settings.lr, weight_decay=settings.weight_decay)
    noise_gen = torch.Generator().manual_seed(settings.seed + 1)
    shuffle_gen = torch.Generator().manual_seed(settings.seed + 2)
    history: List[Dict[str, float]] = []
    start_epoch = 0

    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        state = torch.load(checkpoint_path, weights_only=False)
        encoder.load_state_dict(state["encoder"])
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        noise_gen.set_state(state["noise_gen"])
        shuffle_gen.set_state(state["shuffle_gen"])
        history = state["loss_history"]
        start_epoch = state["epoch"]
        if log:
            log(f"resumed from {checkpoint_path} at epoch {start_epoch}")

    n = len(corpus.train)
    T = sched.timesteps
    alpha_bar_t = torch.from_numpy(sched.alpha_bar.copy()).float()
    for epoch in range(start_epoch, settings.epochs):
        encoder.train()
        model.train()
        order = torch.randperm(n, generator=shuffle_gen).tolist()
        sums = {"cd": 0.0, "diff": 0.0, "pos": 0.0, "total": 0.0}
        seen = 0
        for start in range(0, n, settings.batch_size):
            batch = [corpus.train[i] for i in order[start : start + settings.batch_size]]
            inputs = batch_encoder_inputs(batch, corpus.faces, corpus.hierarchy, enc_config)
            cond = encoder(inputs)
            b = len(batch)
            z0 = torch.stack([r.z0 for r in batch])
            label_idx = torch.stack([r.label_idx for r in batch])
            if settings.use_diffusion:
                t = torch.randint(1, T + 1, (b,), generator=noise_gen)
                eps = torch.randn(z0.shape, generator=noise_gen)
                ab = alpha_bar_t[t]
                z_t = torch.sqrt(ab)[:, None, None] * z0 + torch.sqrt(1 - ab)[:, None, None] * eps
                z0_hat = model(cond, z_t, t.to(z0.dtype), label_idx=label_idx)
            else:
                z0_hat = model(cond, label_idx=label_idx)
            out = composite_loss_batch(
                torch.stack([r.input_verts for r in batch]),
                torch.stack([r.gt_verts for r in batch]),
                z0,
                z0_hat,
                settings.weights,
            )
            total = out["total"]
            if not torch.isfinite(total):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1} (step {start // settings.batch_size})"
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            for key in sums:
                sums[key] += float(out[key].detach()) * b
            seen += b
        epoch_stats = {k: v / seen for k, v in sums.items()}
        epoch_stats["epoch"] = epoch + 1
        history.append(epoch_stats)
        if log:
            log(
                "epoch %d/%d  cd %.4f  diff %.4f  pos %.4f  total %.4f"
                % (
                    epoch + 1,
                    settings.epochs,
                    epoch_stats["cd"],
                    epoch_stats["diff"],
                    epoch_stats["pos"],
                    epoch_stats["total"],
                )
            )
        if checkpoint_path is not None and (epoch + 1) % checkpoint_every == 0:
            torch.save(
                {
                    "encoder": encoder.state_dict(),
                    "model": model.state_dict(),
                    "optimizer": opt.state_dict(),
                    "noise_gen": noise_gen.get_state(),
                    "shuffle_gen": shuffle_gen.get_state(),
                    "loss_history": history,
                    "epoch": epoch + 1,
                },
                checkpoint_path,
            )

    return TrainedModel(
        encoder=encoder,
        model=model,
        schedule=sched,
        enc_config=enc_config,
        use_diffusion=settings.use_diffusion,
        tag=architecture_tag(enc_config, settings.use_diffusion),
        loss_history=history,
    )


# ---------------------------------------------------------------------------
# Checkpoint persistence

CHECKPOINT_VERSION = 1


def save_checkpoint(
    trained: TrainedModel,
    path,
    config_echo: str = "",
    denoiser_kwargs: Optional[Dict] = None,
) -> None:
    """One-file checkpoint: weights, schedule, architecture tag, config echo."""
    import dataclasses

    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "tag": trained.tag,
            "enc_config": dataclasses.asdict(trained.enc_config),
            "denoiser_kwargs": denoiser_kwargs or {},
            "use_diffusion": trained.use_diffusion,
            "alpha_bar": trained.schedule.alpha_bar.copy(),
            "encoder": trained.encoder.state_dict(),
            "model": trained.model.state_dict(),
            "loss_history": trained.loss_history,
            "config_echo": config_echo,
        },
        path,
    )


def load_checkpoint(path) -> Tuple[TrainedModel, str]:
    """Rebuild a TrainedModel; rejects weight/dimension mismatches."""
    state = torch.load(path, weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise GeometryError(
            f"checkpoint version {state.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    enc_kw = dict(state["enc_config"])
    for key in ("sa_npoints", "sa_radii", "sa_nsamples"):
        enc_kw[key] = tuple(enc_kw[key])
    enc_config = EncoderConfig(**enc_kw)
    encoder = ConditionEncoder(enc_config)
    maker = make_denoiser if state["use_diffusion"] else make_regressor
    model = maker(enc_config, **state["denoiser_kwargs"])
    try:
        encoder.load_state_dict(state["encoder"])
        model.load_state_dict(state["model"])
    except RuntimeError as exc:
        raise GeometryError(
            f"checkpoint weights do not match the configured dimensions: {exc}"
        ) from exc
    trained = TrainedModel(
        encoder=encoder,
        model=model,
        schedule=NoiseSchedule(state["alpha_bar"]),
        enc_config=enc_config,
        use_diffusion=state["use_diffusion"],
        tag=state["tag"],
        loss_history=state["loss_history"],
    )
    return trained, state.get("config_echo", "")


# ---------------------------------------------------------------------------
# Prediction


def predict_params(
    trained: TrainedModel,
    record: DatasetRecord,
    n_steps: int = 50,
    seed: int = 0,
    tensors: Optional[RecordTensors] = None,
    faces: Optional[torch.Tensor] = None,
    hierarchy: Optional[torch.Tensor] = None,
) -> TransformParams:
    """Sample (or regress) the alignment parameters for one record."""
    enc_config = trained.enc_config
    rec = tensors if tensors is not None else record_tensors(record, enc_config)
    first = record.input.teeth[record.input.labels[0]]
    if faces is None:
        faces = torch.from_numpy(np.array(first.faces))
        hierarchy = torch.from_numpy(np.array(first.patch_hierarchy))
    inputs = batch_encoder_inputs([rec], faces, hierarchy, enc_config)
    trained.encoder.eval()
    label_idx = rec.label_idx.unsqueeze(0)
    with torch.no_grad():
        cond = trained.encoder(inputs)
        if trained.use_diffusion:
            z = sample_transforms(
                trained.model, cond, trained.schedule, n_steps, seed, label_idx=label_idx
            )
        else:
            trained.model.eval()
            z = trained.model(cond, label_idx=label_idx)
    return params_from_matrix(rec.labels, z[0].numpy())
