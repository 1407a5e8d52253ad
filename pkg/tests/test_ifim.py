import pytest
import torch

from mrsnet.ifim import AdaptiveFusion, IntraScaleInteraction


def make_mask(batch, n_tokens, valid):
    mask = torch.zeros(batch, n_tokens, dtype=torch.bool)
    mask[:, :valid] = True
    return mask


def identity_projection(conv):
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
        for i in range(conv.weight.shape[0]):
            conv.weight[i, i, 0, 0] = 1.0


class TestAdaptiveFusion:
    def test_saturated_gates_sum_three_branches(self):
        dim = 4
        fuse = AdaptiveFusion(dim)
        with torch.no_grad():
            fuse.gate_conv.weight.zero_()
            fuse.gate_conv.bias.fill_(20.0)
        identity_projection(fuse.project)
        x = torch.randn(1, dim, 3, 3)
        out = fuse(x, x.clone(), x.clone())
        assert torch.allclose(out.refined, 3.0 * x, rtol=1e-6, atol=1e-6)

    def test_zero_inputs_give_zero_mix(self):
        fuse = AdaptiveFusion(4)
        identity_projection(fuse.project)
        zero = torch.zeros(2, 4, 3, 3)
        out = fuse(zero, zero, zero)
        assert out.refined.abs().sum() == 0

    def test_shape_contract(self):
        torch.manual_seed(0)
        fuse = AdaptiveFusion(96)
        x = [torch.randn(1, 96, 8, 8) for _ in range(3)]
        out = fuse(*x)
        assert out.refined.shape == (1, 96, 8, 8)
        assert out.gates.shape == (1, 3, 96, 8, 8)

    def test_gates_strictly_in_unit_interval(self):
        torch.manual_seed(1)
        fuse = AdaptiveFusion(8)
        out = fuse(*[torch.randn(2, 8, 4, 4) for _ in range(3)])
        assert (out.gates > 0).all() and (out.gates < 1).all()

    def test_shape_mismatch_rejected(self):
        fuse = AdaptiveFusion(4)
        with pytest.raises(ValueError, match="branch shapes"):
            fuse(torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 3, 3), torch.zeros(1, 4, 2, 2))


class TestIntraScaleInteraction:
    def forward_once(self, module, dim=8, size=8, tokens=5):
        torch.manual_seed(0)
        x = torch.randn(1, dim, size, size)
        lang = torch.randn(1, 6, tokens)
        return module(x, lang, make_mask(1, tokens, tokens - 1))

    def test_full_module_shape(self):
        torch.manual_seed(0)
        block = IntraScaleInteraction(96, 64, pyramid_factors=(1, 2, 4))
        x = torch.randn(1, 96, 16, 16)
        lang = torch.randn(1, 64, 5)
        out = block(x, lang, make_mask(1, 5, 5))
        assert out.refined.shape == (1, 96, 16, 16)

    def _branch_grad_summary(self, use_psr, use_csr):
        torch.manual_seed(3)
        block = IntraScaleInteraction(
            8, 6, pyramid_factors=(1, 2), use_psr=use_psr, use_csr=use_csr
        )
        out = self.forward_once(block)
        out.refined.sum().backward()
        def has_grad(module):
            grads = [p.grad for p in module.parameters()]
            return any(g is not None and g.abs().sum() > 0 for g in grads)
        return {
            "psr": has_grad(block.pyramid),
            "csr": has_grad(block.relations),
            "cma": has_grad(block.align),
            "fuse": has_grad(block.fuse),
        }

    def test_disabled_pyramid_gets_no_gradient(self):
        grads = self._branch_grad_summary(use_psr=False, use_csr=True)
        assert not grads["psr"]
        assert grads["csr"] and grads["cma"] and grads["fuse"]

    def test_disabled_relations_get_no_gradient(self):
        grads = self._branch_grad_summary(use_psr=True, use_csr=False)
        assert not grads["csr"]
        assert grads["psr"] and grads["cma"] and grads["fuse"]

    def test_all_branches_train_when_enabled(self):
        grads = self._branch_grad_summary(use_psr=True, use_csr=True)
        assert all(grads.values())

    def test_disabled_branch_params_still_present(self):
        block = IntraScaleInteraction(8, 6, use_psr=False, use_csr=False)
        names = {n for n, _ in block.named_parameters()}
        assert any(n.startswith("pyramid.") for n in names)
        assert any(n.startswith("relations.") for n in names)

    def test_outputs_finite_over_random_trials(self):
        torch.manual_seed(7)
        block = IntraScaleInteraction(8, 6, pyramid_factors=(1, 2))
        for _ in range(100):
            x = torch.randn(1, 8, 4, 4) * 10.0
            lang = torch.randn(1, 6, 4) * 10.0
            out = block(x, lang, make_mask(1, 4, 3))
            assert torch.isfinite(out.refined).all()
            assert torch.isfinite(out.gates).all()
