import pytest
import torch

from helpers import fd_grad, rel_err
from refsr.denoiser import (
    ConditioningBundle,
    DenoiserConfig,
    ToyUNet,
    timestep_embedding,
)
from refsr.types import ConfigurationError, ShapeError


def tiny_cfg(**kw):
    base = dict(levels=4, channels=(8, 8, 8, 8), heads=2, context_dim=8,
                time_dim=16, latent_channels=4, attn_levels=(2, 3))
    base.update(kw)
    return DenoiserConfig(**base)


def zero_bundle(cfg, hw=(8, 8), batch=1, tokens=None, s=1.0):
    local = [torch.zeros(batch, cfg.channels[i], max(hw[0] >> i, 1), max(hw[1] >> i, 1))
             for i in range(cfg.levels)]
    return ConditioningBundle(local=local, tokens=tokens, s=s)


class TestTimeEmbedding:
    def test_distinct_over_schedule(self):
        t = torch.arange(1000)
        emb = timestep_embedding(t, 64)
        uniq = {tuple(row.tolist()) for row in emb}
        assert len(uniq) == 1000

    def test_odd_dim_padded(self):
        emb = timestep_embedding(torch.arange(4), 7)
        assert emb.shape == (4, 7)


class TestPredictNoise:
    def test_zero_injection_equals_uninjected(self):
        torch.manual_seed(0)
        cfg = tiny_cfg()
        unet = ToyUNet(cfg)
        z = torch.randn(1, 4, 8, 8)
        bundle0 = zero_bundle(cfg)
        out_a = unet.predict_noise(z, 3, bundle0)
        # adding explicit zeros at every level is the uninjected activation
        out_b = unet.predict_noise(z, 3, zero_bundle(cfg))
        assert torch.equal(out_a, out_b)
        assert out_a.shape == z.shape

    def test_s0_reference_invisibility(self):
        torch.manual_seed(1)
        cfg = tiny_cfg()
        unet = ToyUNet(cfg)
        z = torch.randn(1, 4, 8, 8)
        bundle_a = zero_bundle(cfg, tokens=torch.randn(1, 5, 8), s=0.0)
        bundle_b = zero_bundle(cfg, tokens=torch.randn(1, 5, 8), s=0.0)
        out_a = unet.predict_noise(z, 3, bundle_a)
        out_b = unet.predict_noise(z, 3, bundle_b)
        assert torch.equal(out_a, out_b)

    def test_tokens_do_influence_at_s1(self):
        torch.manual_seed(2)
        cfg = tiny_cfg()
        unet = ToyUNet(cfg)
        z = torch.randn(1, 4, 8, 8)
        out_a = unet.predict_noise(z, 3, zero_bundle(cfg, tokens=torch.randn(1, 5, 8)))
        out_b = unet.predict_noise(z, 3, zero_bundle(cfg, tokens=torch.randn(1, 5, 8)))
        assert not torch.equal(out_a, out_b)

    def test_deterministic_forward(self):
        torch.manual_seed(3)
        cfg = tiny_cfg()
        unet = ToyUNet(cfg)
        z = torch.randn(1, 4, 8, 8)
        bundle = zero_bundle(cfg, tokens=torch.randn(1, 5, 8))
        assert torch.equal(unet.predict_noise(z, 9, bundle), unet.predict_noise(z, 9, bundle))

    def test_bundle_validation(self):
        cfg = tiny_cfg()
        unet = ToyUNet(cfg)
        z = torch.randn(1, 4, 8, 8)
        bad = zero_bundle(cfg)
        bad.local = bad.local[:-1]
        with pytest.raises(ConfigurationError):
            unet.predict_noise(z, 0, bad)
        bad2 = zero_bundle(cfg)
        bad2.local[1] = torch.zeros(1, 8, 8, 8)  # wrong spatial dims
        with pytest.raises(ShapeError):
            unet.predict_noise(z, 0, bad2)
        bad3 = zero_bundle(cfg, tokens=torch.randn(1, 5, 9))
        with pytest.raises(ConfigurationError):
            unet.predict_noise(z, 0, bad3)

    def test_injection_additivity_per_level(self):
        torch.manual_seed(4)
        cfg = tiny_cfg()
        unet = ToyUNet(cfg)
        z = torch.randn(1, 4, 8, 8)
        base = zero_bundle(cfg, tokens=None)
        ref = unet.predict_noise(z, 2, base)
        # a nonzero injection at level 1 changes the output; zeroing it restores
        mod = zero_bundle(cfg, tokens=None)
        mod.local[1] = torch.randn_like(mod.local[1])
        changed = unet.predict_noise(z, 2, mod)
        assert not torch.equal(ref, changed)
        mod.local[1] = torch.zeros_like(mod.local[1])
        assert torch.equal(ref, unet.predict_noise(z, 2, mod))

    def test_gradient_wrt_zt_double(self):
        torch.manual_seed(5)
        cfg = tiny_cfg(channels=(4, 4, 4, 4), heads=2, context_dim=4, time_dim=8,
                       latent_channels=2)
        unet = ToyUNet(cfg).double()
        z = torch.randn(1, 2, 8, 8, dtype=torch.float64)
        bundle = ConditioningBundle(
            local=[torch.randn(1, 4, max(8 >> i, 1), max(8 >> i, 1), dtype=torch.float64)
                   for i in range(4)],
            tokens=torch.randn(1, 3, 4, dtype=torch.float64))
        w = torch.randn_like(z)

        def loss_of(x):
            return (unet.predict_noise(x, 3, bundle) * w).sum()

        zz = z.clone().requires_grad_(True)
        (unet.predict_noise(zz, 3, bundle) * w).sum().backward()
        assert rel_err(zz.grad, fd_grad(loss_of, z, h=1e-5)) <= 1e-5

    def test_gradient_wrt_zt_single_precision(self):
        torch.manual_seed(6)
        cfg = tiny_cfg(channels=(4, 4, 4, 4), heads=2, context_dim=4, time_dim=8,
                       latent_channels=2)
        unet = ToyUNet(cfg)
        z = torch.randn(1, 2, 8, 8)
        bundle = ConditioningBundle(
            local=[torch.randn(1, 4, max(8 >> i, 1), max(8 >> i, 1)) for i in range(4)],
            tokens=torch.randn(1, 3, 4))
        w = torch.randn_like(z)

        def loss_of(x):
            return (unet.predict_noise(x, 3, bundle) * w).sum()

        zz = z.clone().requires_grad_(True)
        (unet.predict_noise(zz, 3, bundle) * w).sum().backward()
        assert rel_err(zz.grad, fd_grad(loss_of, z, h=1e-2)) <= 1e-2

    def test_per_sample_s(self):
        torch.manual_seed(7)
        cfg = tiny_cfg()
        unet = ToyUNet(cfg)
        z = torch.randn(2, 4, 8, 8)
        tokens = torch.randn(2, 5, 8)
        bundle = zero_bundle(cfg, batch=2, tokens=tokens,
                             s=torch.tensor([0.0, 1.0]))
        out = unet.predict_noise(z, 3, bundle)
        # sample 0 with s=0 must equal the token-free forward
        free = unet.predict_noise(z[:1], 3, zero_bundle(cfg, batch=1, tokens=None))
        assert torch.allclose(out[0], free[0], atol=1e-6)


class TestConfig:
    def test_channel_head_divisibility_checked(self):
        with pytest.raises(ConfigurationError):
            DenoiserConfig(levels=4, channels=(6, 8, 8, 8), heads=4, context_dim=8,
                           time_dim=8, latent_channels=4, attn_levels=(0,))

    def test_levels_channels_mismatch(self):
        with pytest.raises(ConfigurationError):
            DenoiserConfig(levels=3, channels=(8, 8, 8, 8))
