import numpy as np
import pytest

from hdrfuse.adapter import (
    AdapterTrainer,
    InjectionPlan,
    S2RAdapter,
    adapt_supervised,
    adapted_layers,
    adapter_parameter_count,
    adapter_trainable_names,
    base_weight_hash,
    full_checkpoint,
    inject,
    merge_layer,
    merge_model,
    model_from_checkpoint,
    set_model_scales,
)
from hdrfuse.autodiff import Tensor
from hdrfuse.errors import ConfigError, PlanError
from hdrfuse.model import Checkpoint, Conv2dLayer, FusionNet, FusionNetConfig, base_checkpoint, train

from conftest import make_sequence, normalized_sequence
from hdrfuse.bracket import BracketConfig, synth_bracket


def small_net(seed=0):
    return FusionNet(FusionNetConfig(base_channels=8, depth=3), seed=seed)


def make_layer(h_in=2, h_out=2, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((h_out, h_in, 1, 1)).astype(np.float32)
    return Conv2dLayer("test", w, np.zeros(h_out, dtype=np.float32))


def brackets_for(n=1, seed0=40, size=24):
    out = []
    for i in range(n):
        seq = normalized_sequence(make_sequence(seed=seed0 + i, size=size))
        out.append(synth_bracket(seq, BracketConfig(seed=seed0 + i)))
    return out


class TestAdapterForward:
    def test_zero_branches_recover_baseline(self, rng):
        layer = make_layer()
        base = layer.forward(Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32)))
        layer.adapter = S2RAdapter(layer, r_s=1, r_t=2, seed=1)
        for branch in (layer.adapter.share, layer.adapter.transfer):
            branch.u.data = np.zeros_like(branch.u.data)
            branch.v.data = np.zeros_like(branch.v.data)
        x = Tensor(base.data[:, :2].copy())
        out = layer.forward(x)
        expected = Conv2dLayer("ref", layer.w.data, layer.b.data).forward(x)
        assert np.array_equal(out.data, expected.data)

    def test_zero_scales_recover_baseline(self, rng):
        layer = make_layer()
        layer.adapter = S2RAdapter(layer, r_s=1, r_t=2, seed=1)
        layer.adapter.share.u.data = rng.standard_normal((2, 1, 1, 1)).astype(np.float32)
        layer.adapter.transfer.u.data = rng.standard_normal((2, 2, 1, 1)).astype(np.float32)
        layer.adapter.set_scales(0.0, 0.0)
        x = Tensor(rng.standard_normal((1, 2, 3, 3)).astype(np.float32))
        out = layer.forward(x)
        expected = Conv2dLayer("ref", layer.w.data, layer.b.data).forward(x)
        assert np.allclose(out.data, expected.data, atol=0.0)

    def test_hand_computed_two_by_two(self):
        layer = Conv2dLayer(
            "h", np.array([[[[1.0]], [[2.0]]], [[[0.0]], [[1.0]]]], dtype=np.float32),
            np.zeros(2, dtype=np.float32),
        )  # W0 = [[1, 2], [0, 1]]
        ad = S2RAdapter(layer, r_s=1, r_t=2, seed=0)
        ad.share.v.data = np.array([[[[1.0]], [[0.0]]]], dtype=np.float32)   # V_s = [1, 0]
        ad.share.u.data = np.array([[[[2.0]]], [[[1.0]]]], dtype=np.float32)  # U_s = [2, 1]^T
        ad.transfer.v.data = np.array(
            [[[[1.0]], [[1.0]]], [[[0.0]], [[1.0]]]], dtype=np.float32
        )  # V_t = [[1,1],[0,1]]
        ad.transfer.u.data = np.array(
            [[[[1.0]], [[0.0]]], [[[0.0]], [[3.0]]]], dtype=np.float32
        )  # U_t = [[1,0],[0,3]]
        ad.set_scales(0.5, 2.0)
        layer.adapter = ad
        x = Tensor(np.array([1.0, 0.0], dtype=np.float32).reshape(1, 2, 1, 1))
        # hand computation on x=(1,0):
        # W0 x = (1, 0); f_s = U_s V_s x = (2, 1); f_t = U_t V_t x = (1, 0)
        # f = (1,0) + 0.5*(2,1) + 2*(1,0) = (4, 0.5)
        out = layer.forward(x).data[0, :, 0, 0]
        assert np.allclose(out, [4.0, 0.5], atol=1e-6)

    def test_scale_linearity(self, rng):
        layer = make_layer(4, 4, seed=2)
        layer.adapter = S2RAdapter(layer, r_s=1, r_t=4, seed=3)
        layer.adapter.share.u.data = rng.standard_normal((4, 1, 1, 1)).astype(np.float32)
        layer.adapter.transfer.u.data = rng.standard_normal((4, 4, 1, 1)).astype(np.float32)
        x = Tensor(rng.standard_normal((1, 4, 2, 2)).astype(np.float32))

        def fwd(a_s, a_t):
            layer.adapter.set_scales(a_s, a_t)
            return layer.forward(x).data.astype(np.float64)

        base = fwd(0.0, 0.0)
        share_unit = fwd(1.0, 0.0) - base
        transfer_unit = fwd(0.0, 1.0) - base
        combined = fwd(0.7, 1.3)
        assert np.allclose(combined, base + 0.7 * share_unit + 1.3 * transfer_unit,
                           atol=1e-6)


class TestInjection:
    def test_transparency_bit_exact(self, tiny_bracket):
        net = small_net(seed=1)
        before = net.predict(tiny_bracket).data
        inject(net, seed=2)
        after = net.predict(tiny_bracket).data
        assert np.array_equal(before, after)

    def test_parameter_count(self):
        net = small_net()
        inject(net, InjectionPlan(selectors=["block0.mix", "head"], r_s=1, r_t=64))
        # block0.mix: 8 -> 8; head: 8 -> 3
        expected = (1 * (8 + 8) + 64 * (8 + 8) + 2) + (1 * (8 + 3) + 64 * (8 + 3) + 2)
        assert adapter_parameter_count(net) == expected

    def test_double_injection_rejected(self):
        net = small_net()
        inject(net)
        with pytest.raises(ConfigError, match="twice"):
            inject(net)

    def test_unresolved_selector(self):
        net = small_net()
        with pytest.raises(PlanError, match="nope"):
            inject(net, InjectionPlan(selectors=["nope", "head"]))

    def test_non_1x1_host_rejected(self):
        net = small_net()
        with pytest.raises(ConfigError, match="1x1"):
            inject(net, InjectionPlan(selectors=["stem"]))

    def test_share_rank_bound_enforced(self):
        net = small_net()
        with pytest.raises(ConfigError, match="share rank"):
            inject(net, InjectionPlan(selectors=["head"], r_s=5))  # min(8,3)=3

    def test_transfer_rank_raised_to_max_dim(self):
        net = small_net()
        inject(net, InjectionPlan(selectors=["head"], r_t=2))
        assert adapted_layers(net)["head"].transfer.rank == 8  # max(8, 3)

    def test_base_frozen_after_injection(self):
        net = small_net()
        inject(net)
        assert not any(t.requires_grad for t in net.base_parameters().values())


class TestMerge:
    def test_zero_branches_bit_exact(self):
        layer = make_layer(3, 3, seed=4)
        layer.adapter = S2RAdapter(layer, r_s=1, r_t=3, seed=5)
        merged = merge_layer(layer)
        assert np.array_equal(merged, layer.w.data)  # U = 0 everywhere

    def test_hand_case(self):
        layer = Conv2dLayer(
            "h", np.array([[[[1.0]], [[2.0]]], [[[0.0]], [[1.0]]]], dtype=np.float32),
            np.zeros(2, dtype=np.float32),
        )
        ad = S2RAdapter(layer, r_s=1, r_t=2, seed=0)
        ad.share.v.data = np.array([[[[1.0]], [[0.0]]]], dtype=np.float32)
        ad.share.u.data = np.array([[[[2.0]]], [[[1.0]]]], dtype=np.float32)
        ad.transfer.v.data = np.array([[[[1.0]], [[1.0]]], [[[0.0]], [[1.0]]]], dtype=np.float32)
        ad.transfer.u.data = np.array([[[[1.0]], [[0.0]]], [[[0.0]], [[3.0]]]], dtype=np.float32)
        ad.set_scales(0.5, 2.0)
        layer.adapter = ad
        merged = merge_layer(layer)[:, :, 0, 0]
        # W' = W0 + 0.5 * U_s V_s + 2 * U_t V_t
        usvs = np.array([[2.0, 0.0], [1.0, 0.0]])
        utvt = np.array([[1.0, 1.0], [0.0, 3.0]])
        expected = np.array([[1.0, 2.0], [0.0, 1.0]]) + 0.5 * usvs + 2.0 * utvt
        assert np.allclose(merged, expected, atol=1e-6)

    def test_equivalence_on_random_layers(self, rng):
        worst = 0.0
        for trial in range(50):
            h_in = int(rng.integers(4, 33))
            h_out = int(rng.integers(4, 33))
            layer = make_layer(h_in, h_out, seed=trial)
            layer.adapter = S2RAdapter(layer, r_s=1, r_t=64, seed=trial + 1)
            layer.adapter.share.u.data = rng.standard_normal(
                layer.adapter.share.u.data.shape).astype(np.float32) * 0.3
            layer.adapter.transfer.u.data = rng.standard_normal(
                layer.adapter.transfer.u.data.shape).astype(np.float32) * 0.1
            layer.adapter.set_scales(float(rng.uniform(0, 2)), float(rng.uniform(0, 2)))
            x = Tensor(rng.standard_normal((1, h_in, 4, 4)).astype(np.float32))
            branched = layer.forward(x).data
            plain = Conv2dLayer("m", merge_layer(layer), layer.b.data)
            merged_out = plain.forward(x).data
            worst = max(worst, float(np.abs(branched - merged_out).max()))
        assert worst < 1e-5

    def test_merge_model_end_to_end(self, tiny_bracket, rng):
        net = small_net(seed=7)
        inject(net, seed=8)
        for ad in adapted_layers(net).values():
            ad.share.u.data = rng.standard_normal(ad.share.u.data.shape).astype(np.float32) * 0.2
            ad.transfer.u.data = rng.standard_normal(ad.transfer.u.data.shape).astype(np.float32) * 0.05
        set_model_scales(net, 0.8, 1.2)
        merged = merge_model(net)
        a = net.predict(tiny_bracket).data
        b = merged.predict(tiny_bracket).data
        assert np.abs(a - b).max() < 1e-5
        assert all(layer.adapter is None for layer in merged.layers.values())

    def test_merge_without_adapters_rejected(self):
        with pytest.raises(ConfigError):
            merge_model(small_net())

    def test_non_mergeable_host(self):
        net = small_net()
        layer = net.layers["stem"]  # 3x3
        fake = S2RAdapter.__new__(S2RAdapter)
        layer.adapter = fake
        with pytest.raises(ConfigError, match="mergeable"):
            merge_layer(layer)


class TestSupervisedAdaptation:
    def test_base_hash_unchanged_and_loss_decreases(self):
        source = brackets_for(1, seed0=40)
        target = brackets_for(1, seed0=70)
        ckpt = train(source, base_channels=8, depth=3, epochs=5, lr=2e-3, crop=16, seed=0)
        trainer = AdapterTrainer(r_s=1, r_t=16, epochs=10, lr=2e-3, crop=0,
                                 augment=False, seed=1)
        trainer.fit(ckpt, target)
        assert base_weight_hash(trainer.net_) == trainer.base_hash_
        assert trainer.history_[-1] < trainer.history_[0]

    def test_only_adapters_trainable(self):
        net = small_net()
        inject(net, InjectionPlan(learn_alpha=True, selectors=net.mix_layer_names()))
        names = adapter_trainable_names(net)
        assert all(n.startswith("adapters/") for n in names)
        assert any(n.endswith("alpha_s") for n in names)
        net2 = small_net()
        inject(net2, InjectionPlan(learn_alpha=False, selectors=net2.mix_layer_names()))
        assert not any(n.endswith("alpha_s") for n in adapter_trainable_names(net2))

    def test_rank_contract_after_training(self):
        source = brackets_for(1, seed0=40)
        target = brackets_for(1, seed0=70)
        ckpt = train(source, base_channels=8, depth=3, epochs=3, lr=2e-3, crop=16, seed=0)
        out = adapt_supervised(ckpt, target, epochs=5, lr=2e-3, r_s=1, r_t=16,
                               crop=16, seed=1)
        net = model_from_checkpoint(out)
        for name, ad in adapted_layers(net).items():
            delta = ad.share.delta_matrix()
            singulars = np.linalg.svd(delta, compute_uv=False)
            assert np.all(singulars[1:] <= 1e-4 * max(singulars[0], 1e-12))

    def test_checkpoint_round_trip_with_adapters(self, tmp_path, tiny_bracket):
        net = small_net(seed=3)
        inject(net, seed=5)
        for ad in adapted_layers(net).values():
            ad.share.u.data += 0.1
        ckpt = full_checkpoint(net, {"stage": "adapted"})
        path = tmp_path / "adapted.ckpt"
        ckpt.save(path)
        back = model_from_checkpoint(Checkpoint.load(path))
        assert np.array_equal(back.predict(tiny_bracket).data,
                              net.predict(tiny_bracket).data)
        assert sorted(back.parameters()) == sorted(net.parameters())

    def test_adapter_namespace_separable(self, tmp_path):
        net = small_net()
        inject(net)
        ckpt = full_checkpoint(net)
        adapters = [k for k in ckpt.params if k.startswith("adapters/")]
        base = [k for k in ckpt.params if not k.startswith("adapters/")]
        assert adapters and base
        assert set(base) == set(base_checkpoint(small_net()).params)


def test_adapter_trainer_estimator_params():
    trainer = AdapterTrainer(r_s=2, r_t=32, epochs=7)
    params = trainer.get_params()
    assert params["r_s"] == 2 and params["epochs"] == 7
    assert AdapterTrainer(**params).get_params() == params
