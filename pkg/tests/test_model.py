import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcfnat import tensor as tn
from pcfnat.errors import ConfigError, ContractError
from pcfnat.gradcheck import miniature_config, run_check
from pcfnat.layers import GA, NA, BatchNorm1d, ChannelLayerNorm, GroupConv1d
from pcfnat.model import (AamSubcenterHead, AttentiveStatsPooling, ModelConfig, SpeakerModel,
                          StatsPooling, aam_subcenter_loss, asp_forward, attention_schedule,
                          count_parameters, drop_path_schedule, format_breakdown, parameter_breakdown)
from pcfnat.tensor import Tape, Tensor

# published model sizes, millions of parameters
PUBLISHED_MILLIONS = {("mfa", 3): 12.6, ("mfa", 4): 15.8, ("mfa", 5): 18.9, ("mfa", 6): 22.1,
          ("pcf", 3): 7.6, ("pcf", 4): 9.0, ("pcf", 5): 10.5, ("pcf", 6): 12.0}


def small(**kw):
    base = dict(channels=16, n_mels=16, na_heads=4, ga_heads=2, window=5, mfa_channels=24,
                embedding_dim=8, asp_bottleneck=8, ffn_mult=2, tile="4x4x4")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def full_pcf():
    model = SpeakerModel(ModelConfig(variant="pcf", layers_per_block=3), seed=0).eval()
    x = Tensor(np.random.default_rng(0).standard_normal((1, 80, 300)).astype(np.float32))
    return model, x


class TestConfig:
    def test_variant_defaults(self):
        assert ModelConfig(variant="pcf").group_schedule == (8, 4, 2, 1)
        assert ModelConfig(variant="mfa").group_schedule == (1, 1, 1, 1)
        assert [ModelConfig(variant="pcf", layers_per_block=L).drop_path_coefficient
                for L in (3, 4, 5, 6)] == [1.0, 1.1, 1.2, 1.3]
        assert ModelConfig(variant="mfa", layers_per_block=6).drop_path_coefficient == 1.0

    @pytest.mark.parametrize("kw", [dict(variant="xyz"), dict(window=26), dict(na_heads=7),
                                    dict(group_schedule=(3, 1, 1, 1)), dict(layers_per_block=0),
                                    dict(group_schedule=(1, 1)), dict(tile="8x8")])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_dict_round_trip(self):
        cfg = small(variant="pcf", four_gas=True)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="layer_per_block"):
            ModelConfig.from_dict({"layer_per_block": 3})


class TestSchedules:
    def test_mfa_ga_placement(self):
        kinds = attention_schedule(ModelConfig(variant="mfa", layers_per_block=3))
        assert kinds == [[NA] * 3, [NA, NA, GA], [NA] * 3, [NA, NA, GA]]

    def test_pcf_ga_placement(self):
        kinds = attention_schedule(ModelConfig(variant="pcf", layers_per_block=4))
        assert kinds == [[NA] * 3 + [GA], [NA] * 4, [NA] * 3 + [GA], [NA] * 4]

    @pytest.mark.parametrize("variant", ["mfa", "pcf"])
    def test_ablation_switches(self, variant):
        four = attention_schedule(ModelConfig(variant=variant, four_gas=True))
        none = attention_schedule(ModelConfig(variant=variant, use_ga=False))
        assert sum(k == GA for b in four for k in b) == 4
        assert all(b[-1] == GA for b in four)
        assert sum(k == GA for b in none for k in b) == 0

    def test_drop_path_linear(self):
        p = drop_path_schedule(ModelConfig(variant="mfa", layers_per_block=3))
        assert len(p) == 12
        assert p[-1] == pytest.approx(0.1)
        np.testing.assert_allclose(np.diff(p), 0.1 / 12)
        assert drop_path_schedule(ModelConfig(variant="pcf", layers_per_block=6))[-1] == pytest.approx(0.13)
        assert set(drop_path_schedule(ModelConfig(use_drop_path=False))) == {0.0}

    def test_built_layers_follow_schedule(self):
        cfg = small(variant="mfa", layers_per_block=2)
        model = SpeakerModel(cfg)
        assert model.layer_kinds() == attention_schedule(cfg)
        probs = [layer.drop_prob for block in model.blocks for layer in block.layers]
        assert probs == drop_path_schedule(cfg)


class TestParameterCounts:
    @pytest.mark.parametrize("variant,L", sorted(PUBLISHED_MILLIONS))
    def test_published_sizes(self, variant, L):
        n = count_parameters(ModelConfig(variant=variant, layers_per_block=L))
        assert abs(n / 1e6 - PUBLISHED_MILLIONS[variant, L]) / PUBLISHED_MILLIONS[variant, L] < 0.05

    @pytest.mark.parametrize("L", [3, 4, 5, 6])
    def test_pcf_smaller(self, L):
        assert count_parameters(ModelConfig(variant="pcf", layers_per_block=L)) < \
            count_parameters(ModelConfig(variant="mfa", layers_per_block=L))
        assert count_parameters(ModelConfig(variant="pcf", layers_per_block=L, group_schedule=(1, 1, 1, 1))) > \
            count_parameters(ModelConfig(variant="pcf", layers_per_block=L))

    @pytest.mark.parametrize("cfg", [
        ModelConfig(variant="pcf", layers_per_block=3), ModelConfig(variant="mfa", layers_per_block=3),
        small(variant="pcf", use_mfa=False, use_asp=False), small(variant="mfa", layernorm=True),
        small(variant="mfa", mfa_norm_act=False)], ids=["pcf3", "mfa3", "pcf-ablate", "ln", "nonorm"])
    def test_matches_built_model(self, cfg):
        assert count_parameters(cfg) == SpeakerModel(cfg).num_parameters()

    def test_component_formulas(self):
        rows = dict(parameter_breakdown(ModelConfig(variant="pcf", layers_per_block=3)))
        convs = [GroupConv1d.count(80, 256, 2, g) for g in (8, 4, 2, 1)]
        assert convs == [5376, 10496, 20736, 41216]
        assert [rows[f"stem{i + 1} (g={g})"] for i, g in enumerate((8, 4, 2, 1))] == [c + 512 for c in convs]
        assert rows["mfa"] == 1024 * 1536 + 1536 + 2 * 1536 == 1_574_400 + 3072
        assert 3072 * 192 + 192 == 590_016
        assert rows["embedding"] == 590_016 + 2 * 3072 + 2 * 192

    def test_table_format(self):
        text = format_breakdown(parameter_breakdown(ModelConfig(variant="pcf", layers_per_block=3)))
        assert text.splitlines()[-1].startswith("total")
        assert "7.51M" in text


class TestForward:
    def test_full_size_shapes(self, full_pcf):
        model, x = full_pcf
        stems = model.stem_forward(x)
        assert [s.shape for s in stems] == [(1, 256, 150)] * 4
        outs = model.backbone_forward(x)
        assert [o.shape for o in outs] == [(1, 256, 150)] * 4
        mfa = model.mfa_forward(outs)
        assert mfa.shape == (1, 1536, 150)
        pooled = model.pool(mfa)
        assert pooled.shape == (1, 3072)
        assert model.embed(pooled).shape == (1, 192)

    def test_unbatched_input(self, full_pcf):
        model, x = full_pcf
        assert model.extract(x.data[0]).shape == (1, 192)

    def test_eval_determinism(self, full_pcf):
        model, x = full_pcf
        np.testing.assert_array_equal(model.extract(x.data), model.extract(x.data))

    def test_batch_independence(self):
        model = SpeakerModel(small(variant="pcf"), seed=3)
        x = np.random.default_rng(0).standard_normal((3, 16, 40)).astype(np.float32)
        together = model.extract(x)
        alone = np.concatenate([model.extract(x[i:i + 1]) for i in range(3)])
        np.testing.assert_allclose(together, alone, atol=1e-5)

    def test_train_mode_restored_after_extract(self):
        model = SpeakerModel(small())
        model.extract(np.zeros((1, 16, 10), np.float32))
        assert model.training

    def test_too_short(self):
        with pytest.raises(ContractError):
            SpeakerModel(small()).extract(np.zeros((1, 16, 1), np.float32))

    @staticmethod
    def _zero_block(block):
        for p in block.parameters():
            p.data[:] = 0.0

    def test_mfa_sequential_dependency(self):
        model = SpeakerModel(small(variant="mfa"), seed=1).eval()
        x = np.random.default_rng(1).standard_normal((1, 16, 40)).astype(np.float32)
        before = model.backbone_forward(x)[3].data
        self._zero_block(model.blocks[0])
        after = model.backbone_forward(x)[3].data
        assert np.abs(after - before).max() > 1e-3

    def test_pcf_stem_feeds_every_block(self):
        model = SpeakerModel(small(variant="pcf"), seed=1).eval()
        x = np.random.default_rng(1).standard_normal((1, 16, 40)).astype(np.float32)
        self._zero_block(model.blocks[0])
        stems = model.stem_forward(x)
        outs = model.backbone_forward(x)
        block2_input = stems[1].data + outs[0].data
        assert np.abs(stems[1].data).max() > 0.1
        assert np.abs(block2_input).max() > 0.1

    def test_mfa_concat_order_matters(self):
        model = SpeakerModel(small(variant="mfa"), seed=2).eval()
        x = np.random.default_rng(2).standard_normal((1, 16, 40)).astype(np.float32)
        outs = model.backbone_forward(x)
        a = model.mfa_forward(outs).data
        b = model.mfa_forward(outs[::-1]).data
        assert np.abs(a - b).max() > 1e-4

    def test_layernorm_switch(self):
        model = SpeakerModel(small(layernorm=True))
        pre_mfa = [m for b in model.blocks for m in b.modules()] + [m for s in model.stems for m in s.modules()]
        assert not any(isinstance(m, BatchNorm1d) for m in pre_mfa)
        assert any(isinstance(m, ChannelLayerNorm) for m in pre_mfa)

    def test_without_mfa_or_asp(self):
        model = SpeakerModel(small(use_mfa=False, use_asp=False))
        assert isinstance(model.pool, StatsPooling)
        assert model.mfa.in_channels == 16
        assert model.extract(np.zeros((2, 16, 20), np.float32)).shape == (2, 8)


class TestPooling:
    def _pool(self, D=12):
        return AttentiveStatsPooling(D, bottleneck=6, rng=np.random.default_rng(0))

    def test_constant_input(self):
        a = np.linspace(-2, 2, 12).astype(np.float32)
        x = Tensor(np.broadcast_to(a[None, :, None], (1, 12, 25)).copy())
        out = asp_forward(x, self._pool()).data[0]
        np.testing.assert_allclose(out[:12], a, atol=1e-5)
        assert np.abs(out[12:]).max() < 1e-4

    @given(st.integers(2, 40), st.integers(0, 2**31 - 1))
    def test_time_permutation_invariance(self, T, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 12, T)).astype(np.float32)
        pool = self._pool()
        perm = rng.permutation(T)
        a = pool(Tensor(x)).data
        b = pool(Tensor(x[:, :, perm])).data
        assert np.abs(a - b).max() < 1e-6 * max(1.0, np.abs(a).max())

    def test_single_frame(self):
        x = np.random.default_rng(0).standard_normal((1, 12, 1)).astype(np.float32)
        out = self._pool()(Tensor(x)).data[0]
        np.testing.assert_allclose(out[:12], x[0, :, 0], atol=1e-6)
        assert np.abs(out[12:]).max() < 1e-4

    def test_weights_normalized(self):
        w = self._pool().weights(Tensor(np.random.default_rng(1).standard_normal((2, 12, 9)))).data
        np.testing.assert_allclose(w.sum(-1), 1, atol=1e-6)

    def test_empty(self):
        with pytest.raises(ContractError):
            self._pool()(tn.zeros((1, 12, 0)))
        with pytest.raises(ContractError):
            StatsPooling()(tn.zeros((1, 12, 0)))


class TestAamLoss:
    def test_no_margin_single_center_is_cosine_softmax(self):
        rng = np.random.default_rng(0)
        with tn.precision(np.float64):
            emb = Tensor(rng.standard_normal((5, 6)))
            head = AamSubcenterHead(6, 4, k=1, margin=0.0, scale=32.0, rng=rng)
            labels = np.array([0, 3, 1, 1, 2])
            loss = aam_subcenter_loss(emb, labels, head).item()
        e = emb.data / np.linalg.norm(emb.data, axis=1, keepdims=True)
        w = head.weight.data[:, 0] / np.linalg.norm(head.weight.data[:, 0], axis=1, keepdims=True)
        logits = 32.0 * e @ w.T
        logp = logits - logits.max(1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(1, keepdims=True))
        assert loss == pytest.approx(-logp[np.arange(5), labels].mean(), rel=1e-12)

    def test_margin_applied_to_target_only(self):
        rng = np.random.default_rng(1)
        with tn.precision(np.float64):
            emb = Tensor(rng.standard_normal((1, 4)))
            head = AamSubcenterHead(4, 3, k=2, margin=0.2, scale=10.0, rng=rng)
            cos = head.cosines(emb).data[0]
            loss = aam_subcenter_loss(emb, np.array([2]), head).item()
        theta = math.acos(cos[2])
        assert theta < math.pi - 0.2
        logits = 10.0 * cos.copy()
        logits[2] = 10.0 * math.cos(theta + 0.2)
        ref = -(logits[2] - math.log(np.exp(logits).sum()))
        assert loss == pytest.approx(ref, rel=1e-10)

    def test_subcenter_max(self):
        head = AamSubcenterHead(2, 1, k=3)
        head.weight.data[0] = [[1, 0], [0, 1], [-1, 0]]
        cos = head.cosines(Tensor([[0.0, 2.0]])).data
        assert cos[0, 0] == pytest.approx(1.0)

    def test_label_range(self):
        head = AamSubcenterHead(4, 3)
        with pytest.raises(ContractError):
            aam_subcenter_loss(tn.ones((2, 4)), np.array([0, 3]), head)
        with pytest.raises(ContractError):
            aam_subcenter_loss(tn.ones((2, 4)), np.array([0]), head)

    def test_monotone_decrease_on_separable_set(self):
        rng = np.random.default_rng(0)
        centers = rng.standard_normal((8, 16)) * 3
        labels = np.repeat(np.arange(8), 4)
        emb = Tensor((centers[labels] + 0.3 * rng.standard_normal((32, 16))).astype(np.float32))
        head = AamSubcenterHead(16, 8, k=3, rng=rng)
        losses = []
        for _ in range(200):
            head.weight.grad = None
            with Tape() as tape:
                loss = aam_subcenter_loss(emb, labels, head)
            tape.backward(loss)
            head.weight.data -= 0.05 * head.weight.grad
            losses.append(loss.item())
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.5 * losses[0]

    def test_gradients(self):
        assert run_check("aam subcenter loss").passed


@pytest.mark.parametrize("name", ["attentive stats pooling", "aam subcenter loss"])
@pytest.mark.parametrize("seed", range(20))
def test_head_gradients_over_seeds(name, seed):
    assert run_check(name, seed).passed


@pytest.mark.parametrize("variant", ["pcf", "mfa"])
def test_miniature_model_gradients(variant):
    result = run_check(f"full model ({variant})")
    assert result.passed, result.line()
    cfg = miniature_config(variant=variant)
    assert (cfg.channels, cfg.layers_per_block, cfg.window, cfg.na_heads) == (16, 1, 3, 2)
