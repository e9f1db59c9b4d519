"""Neural feature embedding for jaws: a patch-based mesh encoder for per-tooth
local features (with masked-autoencoder pretraining), a transformer that
propagates features among teeth, and a hierarchical point-cloud encoder for
the global jaw feature. The three are fused per tooth as
concat(global, center, local).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import GeometryError, JawModel, ToothMesh, sample_points

FACE_FEATURE_DIM = 15  # center 3 + unit normal 3 + three corner-to-center vectors 9


@dataclass(frozen=True)
class EncoderConfig:
    d_local: int = 256
    d_global: int = 256
    local_blocks: int = 4
    prop_blocks: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    patch_faces: int = 64
    points_per_tooth: int = 128
    mask_ratio: float = 0.75
    mae_decoder_dim: int = 128
    mae_decoder_blocks: int = 2
    sa_npoints: Tuple[int, int] = (256, 64)
    sa_radii: Tuple[float, float] = (5.0, 12.0)
    sa_nsamples: Tuple[int, int] = (32, 32)
    coord_scale: float = 0.02  # fixed input normalization for mm coordinates
    use_global: bool = True
    use_propagation: bool = True
    point_local: bool = False  # ablation: point-based local encoder instead of mesh

    @property
    def cond_dim(self) -> int:
        return (self.d_global if self.use_global else 0) + 3 + self.d_local


# ---------------------------------------------------------------------------
# Face / patch features


def face_feature_tensor(verts: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    """Per-face features (..., F, 15): center, unit normal, corner offsets."""
    corners = verts[..., faces, :]  # (..., F, 3, 3)
    center = corners.mean(dim=-2)
    e1 = corners[..., 1, :] - corners[..., 0, :]
    e2 = corners[..., 2, :] - corners[..., 0, :]
    normal = torch.cross(e1, e2, dim=-1)
    normal = normal / normal.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    offsets = (corners - center.unsqueeze(-2)).flatten(-2)
    return torch.cat([center, normal, offsets], dim=-1)


def patch_feature_tensor(
    verts: torch.Tensor, faces: torch.Tensor, hierarchy: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Concatenate face features within each patch.

    Returns (..., T, P*15) patch features and (..., T, 3) patch centers.
    """
    feats = face_feature_tensor(verts, faces)  # (..., F, 15)
    t, p = hierarchy.shape
    grouped = feats[..., hierarchy.reshape(-1), :]
    grouped = grouped.reshape(*feats.shape[:-2], t, p, FACE_FEATURE_DIM)
    centers = grouped[..., :3].mean(dim=-2)
    return grouped.flatten(-2), centers


def mesh_patch_arrays(mesh: ToothMesh) -> Tuple[np.ndarray, np.ndarray]:
    """(n_patches, P*15) patch features and (n_patches, 3) centers of one tooth."""
    if mesh.patch_hierarchy is None or mesh.n_patches == 0:
        raise GeometryError(f"tooth {mesh.label} has no patch hierarchy")
    feats, centers = patch_feature_tensor(
        torch.from_numpy(np.array(mesh.vertices)),
        torch.from_numpy(np.array(mesh.faces)),
        torch.from_numpy(np.array(mesh.patch_hierarchy)),
    )
    return feats.numpy(), centers.numpy()


# ---------------------------------------------------------------------------
# Transformer building blocks


class SelfAttention(nn.Module):
    """Multi-head self-attention with optional key padding and a switch that
    forces uniform attention weights (sanity-check hook)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise GeometryError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.force_uniform = False

    def forward(self, x: torch.Tensor, key_padding_mask: Optional[torch.Tensor] = None):
        b, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        if key_padding_mask is not None:
            pad = key_padding_mask[:, None, None, :]  # True marks padding
            scores = scores.masked_fill(pad, float("-inf"))
        if self.force_uniform:
            scores = torch.zeros_like(scores)
            if key_padding_mask is not None:
                scores = scores.masked_fill(pad, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), key_padding_mask)
        x = x + self.mlp(self.norm2(x))
        return x


def _run_blocks(blocks, x, key_padding_mask=None):
    for blk in blocks:
        x = blk(x, key_padding_mask)
    return x


# ---------------------------------------------------------------------------
# Local mesh encoder + masked-autoencoder pretraining


class LocalMeshEncoder(nn.Module):
    """Per-tooth encoder over mesh patches: patch embedding + positional
    embedding from patch centers, a short transformer, mean pool."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        in_dim = config.patch_faces * FACE_FEATURE_DIM
        self.patch_embed = nn.Linear(in_dim, config.d_local)
        self.pos_embed = nn.Linear(3, config.d_local)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_local, config.heads, config.mlp_ratio)
            for _ in range(config.local_blocks)
        )
        self.norm = nn.LayerNorm(config.d_local)
        # fixed column scaling: absolute mm coordinates inside the patch
        # features are shrunk to O(1) before the learned projection
        scale = torch.ones(FACE_FEATURE_DIM)
        scale[:3] = config.coord_scale
        scale[6:] = 1.0  # corner offsets are already tooth-scale
        self.register_buffer("feat_scale", scale.repeat(config.patch_faces))

    def embed(self, patch_feats: torch.Tensor, patch_centers: torch.Tensor):
        tokens = self.patch_embed(patch_feats * self.feat_scale)
        return tokens + self.pos_embed(patch_centers * self.config.coord_scale)

    def encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.norm(_run_blocks(self.blocks, tokens))

    def forward(self, patch_feats: torch.Tensor, patch_centers: torch.Tensor):
        """(B, T, P*15), (B, T, 3) -> (B, d_local)."""
        if patch_feats.shape[-2] == 0:
            raise GeometryError("tooth with zero patches cannot be encoded")
        return self.encode_tokens(self.embed(patch_feats, patch_centers)).mean(dim=1)

    @torch.no_grad()
    def encode_mesh(self, mesh: ToothMesh) -> np.ndarray:
        self.eval()
        feats, centers = mesh_patch_arrays(mesh)
        out = self(
            torch.from_numpy(feats).float().unsqueeze(0),
            torch.from_numpy(centers).float().unsqueeze(0),
        )
        return out.squeeze(0).numpy()


class PointLocalEncoder(nn.Module):
    """Ablation variant: encodes a tooth from its sampled point cloud."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.d_local
        self.config = config
        self.mlp = nn.Sequential(
            nn.Linear(3, 64), nn.LayerNorm(64), nn.ReLU(),
            nn.Linear(64, 128), nn.LayerNorm(128), nn.ReLU(),
            nn.Linear(128, d),
        )
        self.pos_embed = nn.Linear(3, d)

    def forward(self, points: torch.Tensor, centers: torch.Tensor):
        """(B, N, 3) tooth points and (B, 3) tooth centers -> (B, d_local)."""
        rel = points - centers.unsqueeze(1)
        pooled = self.mlp(rel).max(dim=1).values
        return pooled + self.pos_embed(centers * self.config.coord_scale)


def random_patch_masking(
    n_tokens: int, mask_ratio: float, generator: torch.Generator
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Split token indices into (visible, masked) with round(T * ratio) masked."""
    n_mask = int(round(n_tokens * mask_ratio))
    n_mask = min(max(n_mask, 1), n_tokens - 1)
    perm = torch.randperm(n_tokens, generator=generator)
    return torch.sort(perm[n_mask:]).values, torch.sort(perm[:n_mask]).values


class MaskedAutoencoder(nn.Module):
    """Masked pretraining head around a LocalMeshEncoder.

    The encoder only ever sees visible patch tokens; masked positions are
    replaced by a shared learned mask embedding on the decoder side, and the
    decoder reconstructs per-face features and corner coordinates of the
    masked patches.
    """

    def __init__(self, encoder: LocalMeshEncoder):
        super().__init__()
        cfg = encoder.config
        if not 0.0 < cfg.mask_ratio < 1.0:
            raise GeometryError("mask_ratio must lie strictly between 0 and 1")
        self.encoder = encoder
        d_dec = cfg.mae_decoder_dim
        self.decoder_embed = nn.Linear(cfg.d_local, d_dec)
        self.mask_token = nn.Parameter(torch.zeros(d_dec))
        self.decoder_pos = nn.Linear(3, d_dec)
        self.decoder_blocks = nn.ModuleList(
            TransformerBlock(d_dec, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.mae_decoder_blocks)
        )
        self.decoder_norm = nn.LayerNorm(d_dec)
        self.head_feat = nn.Linear(d_dec, cfg.patch_faces * FACE_FEATURE_DIM)
        self.head_vert = nn.Linear(d_dec, cfg.patch_faces * 9)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(
        self,
        patch_feats: torch.Tensor,
        patch_centers: torch.Tensor,
        corner_targets: torch.Tensor,
        visible: torch.Tensor,
        masked: torch.Tensor,
    ) -> Dict[str, torch.Tensor]:
        cfg = self.encoder.config
        b, t, _ = patch_feats.shape
        tokens = self.encoder.embed(patch_feats, patch_centers)
        encoded = self.encoder.encode_tokens(tokens[:, visible, :])

        dec = self.decoder_embed(encoded)
        full = self.mask_token.expand(b, t, -1).clone()
        full[:, visible, :] = dec
        full = full + self.decoder_pos(patch_centers * cfg.coord_scale)
        full = self.decoder_norm(_run_blocks(self.decoder_blocks, full))

        pred_feat = self.head_feat(full[:, masked, :])
        pred_vert = self.head_vert(full[:, masked, :])
        target_feat = patch_feats[:, masked, :] * self.encoder.feat_scale
        target_vert = corner_targets[:, masked, :] * cfg.coord_scale
        loss_feat = F.mse_loss(pred_feat, target_feat)
        loss_vert = F.mse_loss(pred_vert, target_vert)
        return {"loss": loss_feat + loss_vert, "feat": loss_feat, "vert": loss_vert}


def corner_coordinate_tensor(verts: torch.Tensor, faces: torch.Tensor, hierarchy: torch.Tensor) -> torch.Tensor:
    """Absolute corner coordinates per patch: (..., T, P*9)."""
    corners = verts[..., faces, :].flatten(-2)  # (..., F, 9)
    t, p = hierarchy.shape
    grouped = corners[..., hierarchy.reshape(-1), :]
    return grouped.reshape(*corners.shape[:-2], t, p * 9)


def pretrain_mae(
    corpus: Sequence[ToothMesh],
    config: EncoderConfig,
    epochs: int = 50,
    batch_size: int = 32,
    lr: float = 1e-4,
    seed: int = 0,
) -> Tuple[Dict[str, torch.Tensor], List[float]]:
    """Masked pretraining over a tooth corpus; returns encoder weights and the
    per-epoch reconstruction loss history."""
    if len(corpus) == 0:
        raise GeometryError("empty pretraining corpus")
    if not 0.0 < config.mask_ratio < 1.0:
        raise GeometryError("mask_ratio must lie strictly between 0 and 1")
    torch.manual_seed(seed)
    encoder = LocalMeshEncoder(config)
    mae = MaskedAutoencoder(encoder)
    opt = torch.optim.AdamW(mae.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)

    feats, centers, corners = [], [], []
    for mesh in corpus:
        f, c = mesh_patch_arrays(mesh)
        feats.append(f)
        centers.append(c)
        corners.append(
            corner_coordinate_tensor(
                torch.from_numpy(np.array(mesh.vertices)),
                torch.from_numpy(np.array(mesh.faces)),
                torch.from_numpy(np.array(mesh.patch_hierarchy)),
            ).numpy()
        )
    feats = torch.from_numpy(np.stack(feats)).float()
    centers = torch.from_numpy(np.stack(centers)).float()
    corners = torch.from_numpy(np.stack(corners)).float()
    n, t = feats.shape[0], feats.shape[1]

    history = []
    mae.train()
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            visible, masked = random_patch_masking(t, config.mask_ratio, gen)
            out = mae(feats[idx], centers[idx], corners[idx], visible, masked)
            opt.zero_grad()
            out["loss"].backward()
            opt.step()
            total += float(out["loss"].detach()) * len(idx)
            count += len(idx)
        history.append(total / count)
    return {k: v.detach().clone() for k, v in encoder.state_dict().items()}, history


# ---------------------------------------------------------------------------
# Feature propagation across teeth


class FeaturePropagation(nn.Module):
    """Self-attention over tooth tokens with center-derived positional encoding."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.pos_embed = nn.Linear(3, config.d_local)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_local, config.heads, config.mlp_ratio)
            for _ in range(config.prop_blocks)
        )
        self.norm = nn.LayerNorm(config.d_local)

    def forward(
        self,
        features: torch.Tensor,
        centers: torch.Tensor,
        padding_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """(B, K, d), (B, K, 3) -> (B, K, d). padding_mask: True marks padding."""
        if features.shape[:-1] != centers.shape[:-1]:
            raise GeometryError(
                f"feature rows {tuple(features.shape)} do not match centers "
                f"{tuple(centers.shape)}"
            )
        x = features + self.pos_embed(centers * self.config.coord_scale)
        return self.norm(_run_blocks(self.blocks, x, padding_mask))


# ---------------------------------------------------------------------------
# Global point-cloud encoder


def canonical_point_order(points: torch.Tensor) -> torch.Tensor:
    """Deduplicate and lexicographically sort a point set.

    Downstream sampling and grouping then depend only on the point *set*,
    which makes the global encoder permutation- and duplication-invariant.
    """
    return torch.unique(points, dim=0, sorted=True)


def farthest_point_indices(points: torch.Tensor, n: int) -> torch.Tensor:
    """Iterative farthest-point sampling starting at index 0."""
    n_pts = len(points)
    if n > n_pts:
        raise GeometryError(f"cannot pick {n} farthest points from {n_pts}")
    idx = torch.empty(n, dtype=torch.long)
    dist = torch.full((n_pts,), float("inf"))
    current = 0
    for i in range(n):
        idx[i] = current
        d = ((points - points[current]) ** 2).sum(dim=1)
        dist = torch.minimum(dist, d)
        current = int(torch.argmax(dist))
    return idx


def ball_group_indices(
    points: torch.Tensor, center_idx: torch.Tensor, radius: float, nsample: int
) -> torch.Tensor:
    """Up-to-nsample nearest neighbours within radius of each center.

    Centers with fewer in-radius neighbours are padded with the center itself.
    """
    centers = points[center_idx]
    d2 = torch.cdist(centers, points) ** 2
    d2 = torch.where(d2 <= radius * radius, d2, torch.full_like(d2, float("inf")))
    k = min(nsample, len(points))
    dist, idx = torch.topk(d2, k, dim=1, largest=False)
    idx = torch.where(torch.isinf(dist), center_idx[:, None].expand_as(idx), idx)
    if k < nsample:
        idx = torch.cat([idx, idx[:, -1:].expand(-1, nsample - k)], dim=1)
    return idx


@dataclass
class PointGrouping:
    """Precomputed FPS/grouping indices for one cloud (geometry-only cache)."""

    fps: List[torch.Tensor]
    groups: List[torch.Tensor]


def compute_grouping(points: torch.Tensor, config: EncoderConfig) -> PointGrouping:
    fps_all, groups = [], []
    current = points
    for n, radius, nsample in zip(config.sa_npoints, config.sa_radii, config.sa_nsamples):
        fi = farthest_point_indices(current, n)
        groups.append(ball_group_indices(current, fi, radius, nsample))
        fps_all.append(fi)
        current = current[fi]
    return PointGrouping(fps=fps_all, groups=groups)


def _stage_mlp(dims: Sequence[int]) -> nn.Sequential:
    layers: List[nn.Module] = []
    for a, b in zip(dims, dims[1:]):
        layers += [nn.Linear(a, b), nn.LayerNorm(b), nn.ReLU()]
    return nn.Sequential(*layers)


class GlobalPointEncoder(nn.Module):
    """Two set-abstraction stages (FPS + radius grouping + shared MLP + max
    pool) followed by a global max pool."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.stage1 = _stage_mlp([3, 64, 64, 128])
        self.stage2 = _stage_mlp([3 + 128, 128, 128, 256])
        self.head = _stage_mlp([3 + 256, 256, config.d_global])

    def forward(
        self, points: torch.Tensor, grouping: Optional[PointGrouping] = None
    ) -> torch.Tensor:
        """(N, 3) jaw point cloud -> (d_global,)."""
        cfg = self.config
        points = canonical_point_order(points)
        if len(points) < cfg.sa_npoints[0]:
            raise GeometryError(
                f"global encoder needs at least {cfg.sa_npoints[0]} distinct "
                f"points, got {len(points)}"
            )
        if grouping is None:
            grouping = compute_grouping(points, cfg)

        xyz, feats = points, None
        for stage, mlp in ((0, self.stage1), (1, self.stage2)):
            centers = xyz[grouping.fps[stage]]
            nbr = grouping.groups[stage]
            rel = (xyz[nbr] - centers[:, None, :]) * cfg.coord_scale
            grouped = rel if feats is None else torch.cat([rel, feats[nbr]], dim=-1)
            feats = mlp(grouped).max(dim=1).values
            xyz = centers
        rel = (xyz - xyz.mean(dim=0)) * cfg.coord_scale
        return self.head(torch.cat([rel, feats], dim=-1)).max(dim=0).values

    @torch.no_grad()
    def encode_cloud(self, points: np.ndarray) -> np.ndarray:
        self.eval()
        return self(torch.from_numpy(np.asarray(points)).float()).numpy()


# ---------------------------------------------------------------------------
# Fusion


def fuse(e_g: Optional[torch.Tensor], locals_: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Per-tooth condition rows concat(e_g, c_k, e_local_k), shape (K, D).

    With e_g None (global encoder ablated) the rows are concat(c_k, e_local_k).
    """
    if locals_.shape[0] != centers.shape[0] or centers.shape[-1] != 3:
        raise GeometryError(
            f"shape mismatch: locals {tuple(locals_.shape)}, centers {tuple(centers.shape)}"
        )
    parts = [centers, locals_]
    if e_g is not None:
        if e_g.dim() != 1:
            raise GeometryError("global feature must be a vector")
        parts.insert(0, e_g.unsqueeze(0).expand(locals_.shape[0], -1))
    return torch.cat(parts, dim=-1)


@dataclass
class FeatureBundle:
    """Fused conditioning for one jaw."""

    e_g: Optional[np.ndarray]
    e_l: np.ndarray  # (K, d_local) post-propagation
    centers: np.ndarray  # (K, 3)
    fused: np.ndarray  # (K, cond_dim)


class ConditionEncoder(nn.Module):
    """Bundles local encoder, optional propagation and optional global encoder
    into the per-tooth conditioning matrix."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.local = (
            PointLocalEncoder(config) if config.point_local else LocalMeshEncoder(config)
        )
        self.propagation = FeaturePropagation(config) if config.use_propagation else None
        self.global_enc = GlobalPointEncoder(config) if config.use_global else None

    def forward(self, batch: "EncoderInputs") -> torch.Tensor:
        """-> (B, K, cond_dim) fused condition rows (padding rows zeroed)."""
        cfg = self.config
        b, k = batch.tooth_centers.shape[:2]
        if cfg.point_local:
            pts = batch.tooth_points.reshape(b * k, -1, 3)
            ctr = batch.tooth_centers.reshape(b * k, 3)
            local = self.local(pts, ctr).reshape(b, k, cfg.d_local)
        else:
            feats = batch.patch_feats.reshape(b * k, *batch.patch_feats.shape[2:])
            pcent = batch.patch_centers.reshape(b * k, *batch.patch_centers.shape[2:])
            local = self.local(feats, pcent).reshape(b, k, cfg.d_local)
        if self.propagation is not None:
            local = self.propagation(local, batch.tooth_centers, ~batch.tooth_mask)

        rows = []
        for i in range(b):
            e_g = None
            if self.global_enc is not None:
                e_g = self.global_enc(batch.clouds[i], batch.groupings[i])
            mask = batch.tooth_mask[i]
            fused_real = fuse(e_g, local[i][mask], batch.tooth_centers[i][mask])
            full = fused_real.new_zeros(k, cfg.cond_dim)
            full[mask] = fused_real
            rows.append(full)
        return torch.stack(rows)


@dataclass
class EncoderInputs:
    """Collated per-batch tensors consumed by ConditionEncoder."""

    patch_feats: torch.Tensor  # (B, K, T, P*15)
    patch_centers: torch.Tensor  # (B, K, T, 3)
    tooth_centers: torch.Tensor  # (B, K, 3)
    tooth_mask: torch.Tensor  # (B, K) bool, True = real tooth
    clouds: List[torch.Tensor]  # per-record (N_i, 3) canonical point clouds
    groupings: List[Optional[PointGrouping]]
    tooth_points: Optional[torch.Tensor] = None  # (B, K, N, 3) for point_local


def jaw_point_cloud(jaw: JawModel, n_per_tooth: int, seed: int) -> np.ndarray:
    """Union surface cloud over all teeth (ascending labels, per-tooth seeds)."""
    pts = [
        sample_points(jaw.teeth[k], n_per_tooth, seed + i)
        for i, k in enumerate(jaw.labels)
    ]
    return np.concatenate(pts, axis=0)


def encoder_inputs_from_jaws(
    jaws: Sequence[JawModel],
    config: EncoderConfig,
    sample_seeds: Sequence[int],
    precompute_groupings: bool = True,
) -> EncoderInputs:
    """Build padded conditioning inputs for a batch of jaws."""
    k_max = max(len(j.teeth) for j in jaws)
    b = len(jaws)
    t = None
    feats_out = centers_out = None
    tooth_centers = torch.zeros(b, k_max, 3)
    mask = torch.zeros(b, k_max, dtype=torch.bool)
    clouds: List[torch.Tensor] = []
    groupings: List[Optional[PointGrouping]] = []
    tooth_points = None

    for i, jaw in enumerate(jaws):
        labels = jaw.labels
        mask[i, : len(labels)] = True
        tooth_centers[i, : len(labels)] = torch.from_numpy(jaw.centers()).float()
        if config.point_local:
            for j, lab in enumerate(labels):
                pts = sample_points(
                    jaw.teeth[lab], config.points_per_tooth, sample_seeds[i] + j
                )
                if tooth_points is None:
                    tooth_points = torch.zeros(b, k_max, config.points_per_tooth, 3)
                tooth_points[i, j] = torch.from_numpy(pts).float()
        else:
            for j, lab in enumerate(labels):
                f, c = mesh_patch_arrays(jaw.teeth[lab])
                if feats_out is None:
                    t = f.shape[0]
                    feats_out = torch.zeros(b, k_max, t, f.shape[1])
                    centers_out = torch.zeros(b, k_max, t, 3)
                feats_out[i, j] = torch.from_numpy(f).float()
                centers_out[i, j] = torch.from_numpy(c).float()
        if config.use_global:
            cloud = torch.from_numpy(
                jaw_point_cloud(jaw, config.points_per_tooth, sample_seeds[i])
            ).float()
            cloud = canonical_point_order(cloud)
            clouds.append(cloud)
            groupings.append(
                compute_grouping(cloud, config) if precompute_groupings else None
            )
        else:
            clouds.append(torch.zeros(0, 3))
            groupings.append(None)

    if feats_out is None:
        feats_out = torch.zeros(b, k_max, 0, config.patch_faces * FACE_FEATURE_DIM)
        centers_out = torch.zeros(b, k_max, 0, 3)
    return EncoderInputs(
        patch_feats=feats_out,
        patch_centers=centers_out,
        tooth_centers=tooth_centers,
        tooth_mask=mask,
        clouds=clouds,
        groupings=groupings,
        tooth_points=tooth_points,
    )
