import numpy as np
import pytest
import torch

from cove.experts import expert_scores, make_batch, make_expert
from cove.fusion import CoVEModel, fuse_hidden, fuse_scores, infer, score_hidden

ROSTER = ["GRU", "ATTN", "BPR", "FPMC"]


def model(variant, seed=0, n_items=20, dim=8, roster=ROSTER, dtype=torch.float64):
    torch.manual_seed(seed)
    m = CoVEModel.build(roster, 5, n_items, dim, variant).to(dtype)
    with torch.no_grad():
        for e in m.experts:
            e.item_biases.uniform_(-0.5, 0.5)
        m.gate.weight.normal_()
    return m


def queries(rng, n_items, count=6):
    return make_batch([(int(rng.integers(0, 5)), [list(rng.integers(0, n_items, size=int(rng.integers(1, 6))))])
                       for _ in range(count)])


class Pair:
    """Two hand-set d=2 experts with a single item."""

    def __init__(self):
        self.experts = [make_expert("BPR", 1, 1, 2).double(), make_expert("BPR", 1, 1, 2).double()]
        with torch.no_grad():
            self.experts[0].item_embeddings.copy_(torch.tensor([[2.0, 0.0]]))
            self.experts[1].item_embeddings.copy_(torch.tensor([[0.0, 2.0]]))
            self.experts[0].item_biases.fill_(0.1)
            self.experts[1].item_biases.fill_(-0.1)
        self.hiddens = [torch.tensor([[1.0, 0.0]], dtype=torch.float64), torch.tensor([[0.0, 1.0]], dtype=torch.float64)]


class TestFuseHidden:
    def test_hand_example(self):
        p = Pair()
        g = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
        fused = fuse_hidden(p.hiddens, p.experts, g)
        item = torch.tensor([0])
        assert fused.h.tolist() == [[0.5, 0.5]]
        assert fused.item_embedding(item).tolist() == [[[1.0, 1.0]]]
        torch.testing.assert_close(fused.item_bias(item), torch.zeros(1, 1, dtype=torch.float64), rtol=0, atol=1e-15)
        torch.testing.assert_close(score_hidden(fused), torch.ones(1, 1, dtype=torch.float64), rtol=0, atol=1e-15)

    def test_vertex(self):
        p = Pair()
        fused = fuse_hidden(p.hiddens, p.experts, torch.tensor([[0.0, 1.0]], dtype=torch.float64))
        assert torch.equal(fused.h, p.hiddens[1])
        assert torch.equal(fused.item_embedding(torch.tensor([0]))[0], p.experts[1].item_embeddings.detach())
        assert torch.equal(fused.item_bias(torch.tensor([0]))[0], p.experts[1].item_biases.detach())

    def test_identical_experts_idempotent(self):
        p = Pair()
        twins = [p.experts[0], p.experts[0]]
        fused = fuse_hidden([p.hiddens[0]] * 2, twins, torch.tensor([[0.5, 0.5]], dtype=torch.float64))
        assert torch.equal(fused.h, p.hiddens[0])
        assert torch.equal(fused.item_embedding(torch.tensor([0]))[0], p.experts[0].item_embeddings.detach())

    def test_zero_weight_expert_may_be_missing(self):
        p = Pair()
        fused = fuse_hidden([p.hiddens[0], None], p.experts, torch.tensor([[1.0, 0.0]], dtype=torch.float64))
        assert torch.equal(fused.h, p.hiddens[0])

    def test_mismatch(self):
        p = Pair()
        with pytest.raises(ValueError):
            fuse_hidden(p.hiddens, p.experts, torch.tensor([[1.0, 0.0, 0.0]]))


class TestScoreHidden:
    def test_zero_h(self):
        p = Pair()
        fused = fuse_hidden([torch.zeros(1, 2, dtype=torch.float64)] * 2, p.experts,
                            torch.tensor([[0.3, 0.7]], dtype=torch.float64))
        torch.testing.assert_close(score_hidden(fused), fused.item_bias(torch.tensor([0])))

    def test_bilinear(self):
        m = model("hidden", seed=1)
        b = queries(np.random.default_rng(1), 20)
        with torch.no_grad():
            g = m.gate_weights(b).weights
            hs = [e.hidden(b) for e in m.experts]
            f1 = fuse_hidden(hs, list(m.experts), g)
            f2 = fuse_hidden([2 * h for h in hs], list(m.experts), g)
            bias = f1.item_bias(torch.arange(20))
            torch.testing.assert_close(score_hidden(f2) - bias, 2 * (score_hidden(f1) - bias))


class TestFuseScores:
    def test_hand(self):
        r = fuse_scores([torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])], torch.tensor([0.3, 0.7]))
        torch.testing.assert_close(r, torch.tensor([0.3, 0.7]))

    def test_one_hot(self):
        r1, r2 = torch.randn(7), torch.randn(7)
        assert torch.equal(fuse_scores([r1, r2], torch.tensor([0.0, 1.0])), r2)

    def test_uniform_identical(self):
        r = torch.randn(7, dtype=torch.float64)
        torch.testing.assert_close(fuse_scores([r, r, r], torch.full((3,), 1 / 3, dtype=torch.float64)), r)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fuse_scores([torch.zeros(3), torch.zeros(4)], torch.tensor([0.5, 0.5]))

    def test_linearity(self):
        rng = torch.Generator().manual_seed(3)
        rs = [torch.randn(11, generator=rng, dtype=torch.float64) for _ in range(3)]
        g = torch.tensor([0.2, 0.5, 0.3], dtype=torch.float64)
        torch.testing.assert_close(fuse_scores([2.5 * r for r in rs], g), 2.5 * fuse_scores(rs, g))

    def test_constant_shift(self):
        rs = [torch.randn(11, dtype=torch.float64) for _ in range(3)]
        g = torch.tensor([0.2, 0.5, 0.3], dtype=torch.float64)
        base, shifted = fuse_scores(rs, g), fuse_scores([r + 4.0 for r in rs], g)
        torch.testing.assert_close(shifted, base + 4.0)
        assert torch.equal(torch.argsort(shifted, stable=True), torch.argsort(base, stable=True))


class TestModel:
    @pytest.mark.parametrize("variant", ["hidden", "score"])
    def test_sparse_matches_continuous_at_k_n(self, variant):
        for seed in range(10):
            m = model(variant, seed, n_items=100, dim=16)
            b = queries(np.random.default_rng(seed), 100)
            with torch.no_grad():
                full = m.score(b)
            assert (infer(m, b, k=4) - full).abs().max() <= 1e-6

    @pytest.mark.parametrize("variant", ["hidden", "score"])
    def test_k1_is_argmax_expert(self, variant):
        m = model(variant, 2)
        b = queries(np.random.default_rng(2), 20, count=1)
        with torch.no_grad():
            j = int(torch.argmax(m.gate_weights(b).weights[0]))
            assert torch.equal(infer(m, b, k=1), expert_scores(m.experts[j], b))

    def test_topk_score_combination(self):
        m = model("score", 3)
        b = queries(np.random.default_rng(3), 20, count=1)
        with torch.no_grad():
            m.gate.weight.zero_()
            # gate logits fixed to [1, 2, 3, 4] through the first coordinate of the GRU gate input
            x = m.experts[0].gate_input(b)[0, 0].item()
            m.gate.weight[0] = torch.tensor([1.0, 2.0, 3.0, 4.0]) / x
            r3, r4 = expert_scores(m.experts[2], b), expert_scores(m.experts[3], b)
            torch.testing.assert_close(infer(m, b, k=2), 0.2689414213699951 * r3 + 0.7310585786300049 * r4)

    def test_sparse_skips_inactive_experts(self, monkeypatch):
        m = model("score", 4)
        b = queries(np.random.default_rng(4), 20, count=1)
        with torch.no_grad():
            active = set(torch.nonzero(m.gate_weights(b, k=2).weights[0]).flatten().tolist())
        called = []
        for i, e in enumerate(m.experts):
            orig = e.hidden
            monkeypatch.setattr(e, "hidden", lambda batch, i=i, orig=orig: called.append(i) or orig(batch))
        infer(m, b, k=2)
        assert set(called) == active

    def test_uniform_mode(self):
        m = CoVEModel.build(ROSTER, 5, 20, 8, "score", gate_mode="uniform")
        b = queries(np.random.default_rng(0), 20)
        assert torch.equal(m.gate_weights(b).weights, torch.full((len(b), 4), 0.25))

    def test_single_expert_equals_standalone(self):
        m = model("score", 5, roster=["GRU"])
        b = queries(np.random.default_rng(5), 20)
        with torch.no_grad():
            assert torch.equal(m.score(b), expert_scores(m.experts[0], b))

    def test_mixed_dims_rejected(self):
        with pytest.raises(ValueError):
            CoVEModel([make_expert("BPR", 2, 5, 4), make_expert("GRU", 2, 5, 8)])
