import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_grad, masked_attention_oracle, rel_err
from refsr.global_fusion import (
    GlobalProjector,
    PatchConvEncoder,
    SemanticTokenAggregator,
    build_encoder,
    extract_global,
    flops_cross_attention,
    masked_cross_attention,
    multihead_masked_attention,
)
from refsr.types import ParameterError, ShapeError


class TestEncoder:
    def test_900_tokens_at_480(self):
        enc = PatchConvEncoder(out_dim=16, base=4)
        g = extract_global(torch.rand(3, 480, 480) * 2 - 1, enc)
        assert g.tokens.shape == (900, 16)
        assert g.grid == (30, 30)

    def test_deterministic(self):
        enc = PatchConvEncoder(out_dim=16, base=4)
        img = torch.rand(3, 64, 64) * 2 - 1
        a = extract_global(img, enc)
        b = extract_global(img.clone(), enc)
        assert torch.equal(a.tokens, b.tokens)

    def test_indivisible_rejected(self):
        enc = PatchConvEncoder(out_dim=8, base=4)
        with pytest.raises(ShapeError):
            enc(torch.zeros(3, 50, 64))

    def test_grid_provenance_sensitivity(self):
        torch.manual_seed(0)
        enc = PatchConvEncoder(out_dim=16, base=8)
        img = torch.rand(3, 64, 64) * 2 - 1
        base = extract_global(img, enc).tokens
        # perturb the patch owned by token (1, 2) on the 4x4 grid
        pert = img.clone()
        pert[:, 16:32, 32:48] += 0.5
        moved = extract_global(pert, enc).tokens
        diffs = (moved - base).norm(dim=-1).reshape(4, 4)
        assert diffs.argmax().item() == 1 * 4 + 2

    def test_registry(self):
        enc = build_encoder("patch_conv", out_dim=8, base=4)
        assert isinstance(enc, PatchConvEncoder)
        with pytest.raises(ParameterError):
            build_encoder("no_such_encoder")


class TestProjector:
    def test_zero_weights_zero_output(self):
        proj = GlobalProjector(8, 12)
        with torch.no_grad():
            for p in proj.parameters():
                p.zero_()
        out = proj(torch.zeros(5, 8))
        assert (out == 0).all()

    def test_shape_contract(self):
        proj = GlobalProjector(8, 12)
        for m in (1, 7, 900):
            assert proj(torch.randn(m, 8)).shape == (m, 12)

    def test_jacobian_vs_finite_differences(self):
        torch.manual_seed(1)
        proj = GlobalProjector(3, 4).double()
        x = torch.randn(4, 3, dtype=torch.float64)
        w = torch.randn(4, 4, dtype=torch.float64)

        def loss_of(t):
            return (proj(t) * w).sum()

        xx = x.clone().requires_grad_(True)
        (proj(xx) * w).sum().backward()
        assert rel_err(xx.grad, fd_grad(loss_of, x)) <= 1e-5


class TestMaskedCrossAttention:
    def test_s0_returns_q_exactly(self):
        q = torch.randn(4, 8)
        k = torch.randn(6, 8)
        v = torch.randn(6, 8)
        out = masked_cross_attention(q, k, v, mask=torch.rand(6), s=0.0)
        assert torch.equal(out, q)

    def test_binary_mask_matches_retained_key_oracle(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(50):
            L = int(torch.randint(1, 9, (1,), generator=g))
            M = int(torch.randint(1, 13, (1,), generator=g))
            C = int(torch.randint(1, 17, (1,), generator=g))
            q = torch.randn(L, C, generator=g, dtype=torch.float64)
            k = torch.randn(M, C, generator=g, dtype=torch.float64)
            v = torch.randn(M, C, generator=g, dtype=torch.float64)
            mask = (torch.rand(M, generator=g) > 0.5).double()
            if mask.sum() == 0:
                mask[0] = 1.0
            ours = masked_cross_attention(q, k, v, mask=mask).numpy()
            ref = masked_attention_oracle(q, k, v, mask)
            assert np.abs(ours - ref).max() <= 1e-5

    def test_all_ones_is_standard_attention_plus_residual(self):
        g = torch.Generator().manual_seed(3)
        q = torch.randn(3, 4, generator=g, dtype=torch.float64)
        k = torch.randn(5, 4, generator=g, dtype=torch.float64)
        v = torch.randn(5, 4, generator=g, dtype=torch.float64)
        with_mask = masked_cross_attention(q, k, v, mask=torch.ones(5, dtype=torch.float64))
        without = masked_cross_attention(q, k, v, mask=None)
        assert torch.allclose(with_mask, without, atol=1e-12)

    def test_all_zero_mask_fallback(self):
        q = torch.randn(3, 4)
        out = masked_cross_attention(q, torch.randn(5, 4), torch.randn(5, 4),
                                     mask=torch.zeros(5))
        assert torch.equal(out, q)

    def test_softmax_rows_sum_to_one_over_retained(self):
        # weight on excluded keys must underflow to zero
        q = torch.randn(2, 4, dtype=torch.float64)
        k = torch.randn(6, 4, dtype=torch.float64)
        v = torch.eye(6, 4, dtype=torch.float64)
        mask = torch.tensor([1.0, 0.0, 1.0, 0.0, 0.0, 1.0], dtype=torch.float64)
        out = masked_cross_attention(q, k, v, mask=mask) - q
        # rows of the attention matrix recovered via v = identity-ish probes
        assert out.abs().max() > 0
        ref = masked_attention_oracle(q, k, v, mask) - q.numpy()
        assert np.abs(out.numpy() - ref).max() <= 1e-12

    def test_mask_length_mismatch(self):
        with pytest.raises(ShapeError):
            masked_cross_attention(torch.zeros(2, 4), torch.zeros(3, 4),
                                   torch.zeros(3, 4), mask=torch.ones(5))


class TestAggregator:
    @pytest.mark.parametrize("m", [256, 900, 1600])
    def test_output_token_count_independent_of_m(self, m):
        agg = SemanticTokenAggregator(dim=32, num_queries=96, heads=4)
        out = agg(torch.randn(m, 32))
        assert out.shape == (96, 32)

    def test_cross_attention_substep_matches_oracle(self):
        # (N=2, M=3) single-head probe of the multihead core
        g = torch.Generator().manual_seed(4)
        q = torch.randn(2, 6, generator=g, dtype=torch.float64)
        k = torch.randn(3, 6, generator=g, dtype=torch.float64)
        v = torch.randn(3, 6, generator=g, dtype=torch.float64)
        term = multihead_masked_attention(q, k, v, heads=1)
        ref = masked_attention_oracle(q, k, v, np.ones(3)) - q.numpy()
        assert np.abs(term.numpy() - ref).max() <= 1e-5

    def test_permutation_invariance_over_input_tokens(self):
        torch.manual_seed(5)
        agg = SemanticTokenAggregator(dim=16, num_queries=8, heads=4).double()
        x = torch.randn(10, 16, dtype=torch.float64)
        perm = torch.randperm(10)
        a = agg(x)
        b = agg(x[perm])
        assert torch.allclose(a, b, atol=1e-10)

    def test_gradient_check(self):
        torch.manual_seed(6)
        agg = SemanticTokenAggregator(dim=8, num_queries=3, heads=2).double()
        x = torch.randn(4, 8, dtype=torch.float64)
        w = torch.randn(3, 8, dtype=torch.float64)

        def loss_of(t):
            return (agg(t) * w).sum()

        xx = x.clone().requires_grad_(True)
        (agg(xx) * w).sum().backward()
        assert rel_err(xx.grad, fd_grad(loss_of, x)) <= 1e-5

    def test_key_mask_excludes_tokens(self):
        torch.manual_seed(7)
        agg = SemanticTokenAggregator(dim=8, num_queries=3, heads=2).double()
        x = torch.randn(6, 8, dtype=torch.float64)
        mask = torch.tensor([1.0, 1.0, 1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        masked = agg(x, key_mask=mask)
        # altering excluded tokens must not change the output
        x2 = x.clone()
        x2[3:] += 100.0
        assert torch.allclose(masked, agg(x2, key_mask=mask), atol=1e-10)


class TestFlops:
    def test_paper_reduction_value(self):
        full = flops_cross_attention(1, 8, 64, 900, 40)
        reduced = flops_cross_attention(1, 8, 64, 96, 40)
        assert 1.0 - reduced / full == pytest.approx(0.89333, abs=1e-4)

    def test_zero_keys(self):
        assert flops_cross_attention(1, 1, 1, 0, 1) == 0

    def test_linear_in_batch(self):
        assert flops_cross_attention(2, 3, 4, 5, 6) == 2 * flops_cross_attention(1, 3, 4, 5, 6)

    @given(st.integers(1, 4), st.integers(1, 8), st.integers(1, 64),
           st.integers(0, 1000), st.integers(1, 64))
    @settings(max_examples=30, deadline=None)
    def test_formula_property(self, b, h, nq, nk, dh):
        assert flops_cross_attention(b, h, nq, nk, dh) == b * h * nq * nk * (4 * dh + 5)
