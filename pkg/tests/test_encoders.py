import numpy as np
import pytest
import torch

from archdiff.encoders import (
    ConditionEncoder,
    EncoderConfig,
    FeaturePropagation,
    GlobalPointEncoder,
    LocalMeshEncoder,
    MaskedAutoencoder,
    PointLocalEncoder,
    SelfAttention,
    canonical_point_order,
    corner_coordinate_tensor,
    encoder_inputs_from_jaws,
    face_feature_tensor,
    fuse,
    jaw_point_cloud,
    mesh_patch_arrays,
    pretrain_mae,
    random_patch_masking,
)
from archdiff.geometry import GeometryError, ToothLabel, ToothMesh, contiguous_patches
from archdiff.synth import ArchSpec, PerturbSpec, generate_jaw, perturb, tooth_template

from grad_check import max_param_grad_rel_error

SMALL = EncoderConfig(
    d_local=32,
    d_global=32,
    local_blocks=1,
    prop_blocks=1,
    heads=4,
    mae_decoder_dim=16,
    mae_decoder_blocks=1,
    sa_npoints=(32, 8),
    sa_radii=(6.0, 14.0),
    sa_nsamples=(8, 8),
    points_per_tooth=16,
)


def template_tooth(kind="molar", label=ToothLabel(11), offset=(0.0, 0.0, 0.0)):
    v, f, h = tooth_template(kind)
    return ToothMesh(label, v + np.asarray(offset), f, h)


class TestFaceFeatures:
    def test_layout_is_fifteen_scalars(self):
        mesh = template_tooth()
        feats = face_feature_tensor(
            torch.from_numpy(np.array(mesh.vertices)),
            torch.from_numpy(np.array(mesh.faces)),
        )
        assert feats.shape == (1024, 15)
        corners = mesh.vertices[mesh.faces]
        center = corners.mean(axis=1)
        assert np.allclose(feats[:, :3].numpy(), center)
        assert np.allclose(np.linalg.norm(feats[:, 3:6].numpy(), axis=1), 1.0)
        # corner offsets reconstruct the corners from the center
        offs = feats[:, 6:].numpy().reshape(-1, 3, 3)
        assert np.allclose(center[:, None, :] + offs, corners, atol=1e-12)

    def test_patch_arrays(self):
        mesh = template_tooth()
        feats, centers = mesh_patch_arrays(mesh)
        assert feats.shape == (16, 64 * 15)
        assert centers.shape == (16, 3)

    def test_no_hierarchy_rejected(self):
        mesh = ToothMesh(ToothLabel(11), np.eye(3), np.array([[0, 1, 2]]))
        with pytest.raises(GeometryError):
            mesh_patch_arrays(mesh)


class TestLocalEncoder:
    def test_output_length(self):
        torch.manual_seed(0)
        enc = LocalMeshEncoder(SMALL)
        out = enc.encode_mesh(template_tooth())
        assert out.shape == (SMALL.d_local,)

    def test_identical_teeth_identical_embeddings(self):
        torch.manual_seed(0)
        enc = LocalMeshEncoder(SMALL)
        a = enc.encode_mesh(template_tooth())
        b = enc.encode_mesh(template_tooth())
        assert np.array_equal(a, b)

    def test_translation_changes_embedding(self):
        torch.manual_seed(0)
        enc = LocalMeshEncoder(SMALL)
        a = enc.encode_mesh(template_tooth())
        b = enc.encode_mesh(template_tooth(offset=(10.0, 0.0, 0.0)))
        assert np.abs(a - b).max() > 1e-4

    def test_zero_patches_rejected(self):
        torch.manual_seed(0)
        enc = LocalMeshEncoder(SMALL)
        with pytest.raises(GeometryError):
            enc(torch.zeros(1, 0, 64 * 15), torch.zeros(1, 0, 3))

    def test_gradients(self):
        torch.manual_seed(1)
        enc = LocalMeshEncoder(SMALL)
        feats, centers = mesh_patch_arrays(template_tooth())
        inputs = [
            torch.from_numpy(feats).unsqueeze(0),
            torch.from_numpy(centers).unsqueeze(0),
        ]
        assert max_param_grad_rel_error(enc, inputs) < 1e-4


class TestMaskedPretraining:
    def test_mask_counts(self):
        gen = torch.Generator().manual_seed(0)
        visible, masked = random_patch_masking(16, 0.75, gen)
        assert len(masked) == 12 and len(visible) == 4
        assert sorted(visible.tolist() + masked.tolist()) == list(range(16))

    def test_invalid_ratio_rejected(self):
        cfg = EncoderConfig(mask_ratio=0.0)
        with pytest.raises(GeometryError):
            MaskedAutoencoder(LocalMeshEncoder(cfg))
        with pytest.raises(GeometryError):
            pretrain_mae([template_tooth()], cfg, epochs=1)

    def test_encoder_never_reads_masked_patches(self):
        torch.manual_seed(0)
        cfg = SMALL
        enc = LocalMeshEncoder(cfg)
        feats, centers = mesh_patch_arrays(template_tooth())
        feats = torch.from_numpy(feats).float().unsqueeze(0)
        centers = torch.from_numpy(centers).float().unsqueeze(0)
        gen = torch.Generator().manual_seed(3)
        visible, masked = random_patch_masking(16, cfg.mask_ratio, gen)
        feats[:, masked, :] = float("nan")
        tokens = enc.embed(feats, centers)
        encoded = enc.encode_tokens(tokens[:, visible, :])
        assert torch.isfinite(encoded).all()

    def test_loss_decreases_over_training(self):
        corpus = [
            template_tooth(kind, offset=(i * 2.0, 0.0, 0.0))
            for i, kind in enumerate(
                ["incisor", "canine", "premolar", "molar"] * 25
            )
        ]
        assert len(corpus) == 100
        _, history = pretrain_mae(corpus, SMALL, epochs=50, batch_size=32, seed=0)
        assert history[-1] < history[0]

    def test_empty_corpus_rejected(self):
        with pytest.raises(GeometryError):
            pretrain_mae([], SMALL, epochs=1)

    def test_gradients(self):
        torch.manual_seed(2)
        mae = MaskedAutoencoder(LocalMeshEncoder(SMALL))
        mesh = template_tooth()
        feats, centers = mesh_patch_arrays(mesh)
        corners = corner_coordinate_tensor(
            torch.from_numpy(np.array(mesh.vertices)),
            torch.from_numpy(np.array(mesh.faces)),
            torch.from_numpy(np.array(mesh.patch_hierarchy)),
        )
        gen = torch.Generator().manual_seed(0)
        visible, masked = random_patch_masking(16, 0.75, gen)

        class LossOnly(torch.nn.Module):
            def __init__(self, mae):
                super().__init__()
                self.mae = mae

            def forward(self, f, c, t):
                return self.mae(f, c, t, visible, masked)["loss"].reshape(1)

        inputs = [
            torch.from_numpy(feats).unsqueeze(0),
            torch.from_numpy(centers).unsqueeze(0),
            corners.unsqueeze(0),
        ]
        assert max_param_grad_rel_error(LossOnly(mae), inputs) < 1e-4


class TestPropagation:
    def test_shape_and_single_tooth(self):
        torch.manual_seed(0)
        prop = FeaturePropagation(SMALL)
        prop.eval()
        x = torch.randn(1, 1, SMALL.d_local)
        c = torch.randn(1, 1, 3)
        out = prop(x, c)
        assert out.shape == (1, 1, SMALL.d_local)
        out2 = prop(x, c)
        assert torch.equal(out, out2)

    def test_permutation_equivariance(self):
        torch.manual_seed(0)
        prop = FeaturePropagation(SMALL)
        prop.eval()
        k = 7
        x = torch.randn(1, k, SMALL.d_local)
        c = torch.randn(1, k, 3) * 20
        out = prop(x, c)
        perm = torch.randperm(k, generator=torch.Generator().manual_seed(1))
        out_perm = prop(x[:, perm], c[:, perm])
        assert torch.allclose(out[:, perm], out_perm, atol=1e-5)

    def test_dimension_mismatch(self):
        torch.manual_seed(0)
        prop = FeaturePropagation(SMALL)
        with pytest.raises(GeometryError):
            prop(torch.randn(1, 4, SMALL.d_local), torch.randn(1, 5, 3))

    def test_uniform_attention_collapses_messages(self):
        torch.manual_seed(0)
        attn = SelfAttention(SMALL.d_local, SMALL.heads)
        attn.eval()
        attn.force_uniform = True
        x = torch.randn(1, 6, SMALL.d_local)
        msg = attn(x)
        # with uniform weights every token receives the same attended message
        assert torch.allclose(msg, msg[:, :1, :].expand_as(msg), atol=1e-6)

    def test_gradients(self):
        torch.manual_seed(3)
        prop = FeaturePropagation(SMALL)
        inputs = [torch.randn(1, 5, SMALL.d_local), torch.randn(1, 5, 3)]
        assert max_param_grad_rel_error(prop, inputs) < 1e-4


class TestGlobalEncoder:
    def _cloud(self, rng, n=200):
        return torch.from_numpy(rng.normal(size=(n, 3)) * 10).float()

    def test_output_length(self, rng):
        torch.manual_seed(0)
        enc = GlobalPointEncoder(SMALL)
        out = enc.encode_cloud(rng.normal(size=(200, 3)) * 10)
        assert out.shape == (SMALL.d_global,)

    def test_permutation_invariance(self, rng):
        torch.manual_seed(0)
        enc = GlobalPointEncoder(SMALL)
        enc.eval()
        pts = self._cloud(rng)
        perm = torch.randperm(len(pts), generator=torch.Generator().manual_seed(2))
        with torch.no_grad():
            a = enc(pts)
            b = enc(pts[perm])
        assert torch.allclose(a, b, atol=1e-5)

    def test_duplication_invariance(self, rng):
        torch.manual_seed(0)
        enc = GlobalPointEncoder(SMALL)
        enc.eval()
        pts = self._cloud(rng)
        with torch.no_grad():
            a = enc(pts)
            b = enc(torch.cat([pts, pts], dim=0))
        assert torch.allclose(a, b, atol=1e-5)

    def test_too_few_points(self, rng):
        torch.manual_seed(0)
        enc = GlobalPointEncoder(SMALL)
        with pytest.raises(GeometryError):
            enc(self._cloud(rng, n=SMALL.sa_npoints[0] - 1))

    def test_canonical_order_sorts_and_dedups(self):
        pts = torch.tensor([[1.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])
        out = canonical_point_order(pts)
        assert out.shape == (2, 3)
        assert torch.equal(out[0], torch.tensor([0.0, 0, 0]))

    def test_gradients(self, rng):
        torch.manual_seed(4)
        enc = GlobalPointEncoder(SMALL)
        inputs = [self._cloud(rng, n=64)]
        assert max_param_grad_rel_error(enc, inputs) < 1e-4


class TestPointLocalEncoder:
    def test_shape_and_gradients(self, rng):
        torch.manual_seed(5)
        enc = PointLocalEncoder(SMALL)
        pts = torch.from_numpy(rng.normal(size=(2, 16, 3))).float()
        ctr = torch.from_numpy(rng.normal(size=(2, 3))).float()
        assert enc(pts, ctr).shape == (2, SMALL.d_local)
        assert max_param_grad_rel_error(enc, [pts, ctr]) < 1e-4


class TestFuse:
    def test_fused_layout(self, rng):
        k, dg, dl = 28, 256, 256
        e_g = torch.from_numpy(rng.normal(size=dg))
        locals_ = torch.from_numpy(rng.normal(size=(k, dl)))
        centers = torch.from_numpy(rng.normal(size=(k, 3)) * 30)
        fused = fuse(e_g, locals_, centers)
        assert fused.shape == (28, 515)
        assert torch.allclose(fused[:, :dg], e_g.expand(k, -1))
        assert torch.equal(fused[:, dg : dg + 3], centers)
        assert torch.equal(fused[:, dg + 3 :], locals_)

    def test_shared_global_block(self, rng):
        fused = fuse(
            torch.from_numpy(rng.normal(size=8)),
            torch.from_numpy(rng.normal(size=(5, 4))),
            torch.from_numpy(rng.normal(size=(5, 3))),
        )
        for row in range(1, 5):
            assert torch.equal(fused[0, :8], fused[row, :8])

    def test_without_global(self, rng):
        fused = fuse(
            None,
            torch.from_numpy(rng.normal(size=(5, 4))),
            torch.from_numpy(rng.normal(size=(5, 3))),
        )
        assert fused.shape == (5, 7)

    def test_shape_mismatch(self, rng):
        with pytest.raises(GeometryError):
            fuse(None, torch.zeros(4, 8), torch.zeros(5, 3))


class TestConditionEncoder:
    def _jaw(self):
        return generate_jaw(ArchSpec(n_teeth_per_jaw=8), seed=0)

    def test_fused_shape(self):
        torch.manual_seed(0)
        enc = ConditionEncoder(SMALL)
        inputs = encoder_inputs_from_jaws([self._jaw()], SMALL, sample_seeds=[1])
        cond = enc(inputs)
        assert cond.shape == (1, 16, SMALL.cond_dim)

    def test_ablation_variants(self):
        jaw = self._jaw()
        for kwargs in (
            dict(use_global=False),
            dict(use_propagation=False),
            dict(point_local=True),
        ):
            cfg = EncoderConfig(
                **{
                    **{f: getattr(SMALL, f) for f in (
                        "d_local", "d_global", "local_blocks", "prop_blocks",
                        "heads", "mae_decoder_dim", "mae_decoder_blocks",
                        "sa_npoints", "sa_radii", "sa_nsamples", "points_per_tooth",
                    )},
                    **kwargs,
                }
            )
            torch.manual_seed(0)
            enc = ConditionEncoder(cfg)
            inputs = encoder_inputs_from_jaws([jaw], cfg, sample_seeds=[1])
            cond = enc(inputs)
            assert cond.shape == (1, 16, cfg.cond_dim)

    def test_padding_rows_zeroed(self):
        torch.manual_seed(0)
        enc = ConditionEncoder(SMALL)
        small_jaw = generate_jaw(ArchSpec(n_teeth_per_jaw=8), seed=0)
        big_jaw = generate_jaw(ArchSpec(n_teeth_per_jaw=10), seed=0)
        inputs = encoder_inputs_from_jaws([small_jaw, big_jaw], SMALL, sample_seeds=[1, 2])
        cond = enc(inputs)
        assert cond.shape[1] == 20
        assert torch.all(cond[0, 16:] == 0)
