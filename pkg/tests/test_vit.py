import numpy as np
import pytest
import torch

from framepred import videodata as vd
from framepred.model import ModelConfig, build_model
from framepred.vit import (DecoderConfig, Encoder, EncoderConfig, MaskPlan,
                           SharedDecoder, make_mask_plan)


def tiny_encoder_cfg(**kw):
    base = dict(image_size=64, patch_size=8, embed_dim=32, depth=2,
                num_heads=2, mlp_ratio=2.0)
    base.update(kw)
    return EncoderConfig(**base)


def make_encoder(seed=0, **kw):
    enc = Encoder(tiny_encoder_cfg(**kw))
    gen = torch.Generator().manual_seed(seed)
    from framepred.vit import init_weights
    init_weights(enc, gen)
    return enc


class TestEncode:
    def test_token_count(self):
        enc = make_encoder()
        out = enc(torch.rand(2, 3, 64, 64))
        assert out.shape == (2, 1 + 64, 32)

    def test_deterministic(self):
        enc = make_encoder()
        x = torch.rand(1, 3, 64, 64)
        assert torch.equal(enc(x), enc(x))

    def test_cls_sensitive_to_single_patch(self):
        enc = make_encoder(seed=1)
        x = torch.rand(1, 3, 64, 64)
        y = x.clone()
        y[0, :, :8, :8] += 0.5  # perturb exactly one patch
        cls_x = enc(x)[0, 0]
        cls_y = enc(y)[0, 0]
        assert (cls_x - cls_y).abs().max() > 0

    def test_shape_mismatch_rejected(self):
        enc = make_encoder()
        with pytest.raises(vd.ConfigurationError):
            enc(torch.rand(1, 3, 32, 32))


class TestRandomMask:
    def test_counts_196(self):
        gen = torch.Generator().manual_seed(0)
        plan = make_mask_plan(196, 0.75, gen)
        assert plan.masked_indices.shape[1] == round(0.75 * 196)
        assert plan.visible_indices.shape[1] == 49

    @pytest.mark.parametrize("n", [16, 64, 196])
    def test_partition(self, n):
        gen = torch.Generator().manual_seed(1)
        plan = make_mask_plan(n, 0.75, gen)
        union = torch.cat([plan.visible_indices, plan.masked_indices], dim=1)
        assert sorted(union[0].tolist()) == list(range(n))

    def test_ratio_zero(self):
        gen = torch.Generator().manual_seed(2)
        plan = make_mask_plan(64, 0.0, gen)
        assert plan.masked_indices.shape[1] == 0
        assert not plan.mask.any()

    def test_invalid_ratio(self):
        gen = torch.Generator().manual_seed(3)
        with pytest.raises(vd.ConfigurationError):
            make_mask_plan(64, 1.0, gen)

    def test_ids_restore_inverts(self):
        gen = torch.Generator().manual_seed(4)
        n = 64
        plan = make_mask_plan(n, 0.75, gen)
        shuffled = torch.cat([plan.visible_indices, plan.masked_indices], dim=1)
        restored = torch.gather(shuffled, 1, plan.ids_restore)
        assert torch.equal(restored[0], torch.arange(n))

    def test_masked_encode_token_count(self):
        enc = make_encoder()
        gen = torch.Generator().manual_seed(5)
        out, plan = enc.forward_masked(torch.rand(2, 3, 64, 64), 0.75, gen)
        assert out.shape == (2, 1 + 16, 32)


def tiny_model(seed=0, **kw):
    cfg_kw = dict(
        encoder=tiny_encoder_cfg(),
        decoder=DecoderConfig(embed_dim=16, depth=1, num_heads=2,
                              mlp_ratio=2.0),
        latent_groups=4, latent_classes=4,
    )
    cfg_kw.update(kw)
    return build_model(ModelConfig(**cfg_kw), init_seed=seed)


class TestDecodePrediction:
    def test_output_shape(self):
        model = tiny_model()
        h = model.encoder(torch.rand(2, 3, 64, 64))
        z = torch.zeros(2, 16)
        out = model.decoder.forward_prediction(h, z)
        assert out.shape == (2, 64, 8 * 8 * 3)

    def test_latent_sensitivity(self):
        model = tiny_model(seed=2)
        h = model.encoder(torch.rand(1, 3, 64, 64))
        gen = torch.Generator().manual_seed(0)
        z1 = torch.rand(1, 16, generator=gen)
        z2 = torch.rand(1, 16, generator=gen)
        out1 = model.decoder.forward_prediction(h, z1)
        out2 = model.decoder.forward_prediction(h, z2)
        assert (out1 - out2).abs().max() > 0

    def test_kv_permutation_invariance(self):
        # Positional embeddings travel with their tokens, so attention over
        # the KV set must be order-invariant.
        model = tiny_model(seed=3).double()
        h = model.encoder(torch.rand(1, 3, 64, 64).double())
        z = torch.rand(1, 16).double()
        kv = model.decoder.prediction_kv(h, z)
        out = model.decoder.forward_with_kv(kv)
        perm = torch.randperm(kv.shape[1], generator=torch.Generator().manual_seed(1))
        out_p = model.decoder.forward_with_kv(kv[:, perm])
        assert (out - out_p).abs().max() < 1e-10


class TestDecodeMae:
    def test_ratio_zero_valid(self):
        model = tiny_model()
        gen = torch.Generator().manual_seed(0)
        x = torch.rand(1, 3, 64, 64)
        visible, plan = model.encoder.forward_masked(x, 0.0, gen)
        out = model.decoder.forward_mae(visible, plan)
        assert out.shape == (1, 64, 192)

    def test_shared_trunk(self):
        model = tiny_model(seed=4)
        x = torch.rand(1, 3, 64, 64)
        gen = torch.Generator().manual_seed(0)
        h = model.encoder(x)
        visible, plan = model.encoder.forward_masked(x, 0.75, gen)
        z = torch.rand(1, 16)
        pred_a = model.decoder.forward_prediction(h, z)
        mae_a = model.decoder.forward_mae(visible, plan)
        # Zeroing the trunk changes both routes.
        with torch.no_grad():
            for blk in model.decoder.blocks:
                for p in blk.parameters():
                    p.zero_()
        pred_b = model.decoder.forward_prediction(h, z)
        mae_b = model.decoder.forward_mae(visible, plan)
        assert (pred_a - pred_b).abs().max() > 0
        assert (mae_a - mae_b).abs().max() > 0

    def test_distinct_projection_toggle(self):
        shared = tiny_model(decoder=DecoderConfig(
            embed_dim=16, depth=1, num_heads=2, mlp_ratio=2.0,
            distinct_projections=False))
        assert shared.decoder.proj_mae is shared.decoder.proj_pred
        distinct = tiny_model()
        assert distinct.decoder.proj_mae is not distinct.decoder.proj_pred

    def test_inconsistent_plan_rejected(self):
        model = tiny_model()
        gen = torch.Generator().manual_seed(0)
        x = torch.rand(1, 3, 64, 64)
        visible, plan = model.encoder.forward_masked(x, 0.75, gen)
        bad = MaskPlan(visible_indices=plan.visible_indices[:, :-2],
                       masked_indices=plan.masked_indices,
                       ids_restore=plan.ids_restore, mask=plan.mask,
                       ratio=plan.ratio)
        with pytest.raises(vd.ConfigurationError):
            model.decoder.forward_mae(visible, bad)


class TestGradientFlow:
    def test_all_encoder_params_receive_gradient(self):
        from framepred.objectives import (ObjectiveConfig, collate_pairs,
                                          total_loss_seeded)
        from framepred.videodata import AugmentParams, augment_pair

        model = tiny_model(seed=5)
        rng = np.random.default_rng(0)
        pairs = [
            augment_pair(rng.random((3, 64, 64), dtype=np.float32),
                         rng.random((3, 64, 64), dtype=np.float32),
                         1, AugmentParams(), np.random.default_rng(i))
            for i in range(2)
        ]
        batch = collate_pairs(pairs)
        loss = total_loss_seeded(model, batch, ObjectiveConfig(), seed=0)
        loss.total.backward()
        for name, p in model.encoder.named_parameters():
            assert p.grad is not None, name
            assert p.grad.abs().sum() > 0, name
