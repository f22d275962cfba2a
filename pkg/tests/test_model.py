import math

import numpy as np
import pytest

from prepromo import autodiff as ad
from prepromo.data import ClickSample, FeatureEncoder
from prepromo.errors import ConfigError
from prepromo.model import (DelayConfig, DelayModel, DelayPrediction,
                            build_gated_input, delay_loss, dump_diagnostics,
                            finetune, gate_forward, pool_sequence)
from prepromo.pretrain import PretrainConfig, pretrain_fit
from prepromo.synth import GenConfig, generate_dataset, sample_world

from oracles import finite_difference_grads, max_grad_mismatch


def tiny_world():
    return sample_world(3, d=4)


def tiny_samples(world, n, mode="prepromo", seed=1):
    return generate_dataset(world, n, mode, seed=seed,
                            gen=GenConfig(n_users=30, n_items=40, n_categories=5,
                                          max_seq_len=3))


def tiny_pretrained(world, seed=2, epochs=1):
    daily = tiny_samples(world, 400, mode="daily", seed=7)
    cfg = PretrainConfig(tower_widths=(5, 3), embedding_dim=2, n_buckets=4,
                         max_seq_len=3, learning_rate=0.05, epochs=epochs,
                         batch_size=128)
    return pretrain_fit(daily, cfg, seed=seed)


@pytest.fixture(scope="module")
def setup():
    world = tiny_world()
    pretrained = tiny_pretrained(world)
    samples = tiny_samples(world, 300, seed=11)
    data = pretrained.encoder.encode(samples)
    return world, pretrained, data


def make_model(pretrained, seed=5, **overrides):
    base = dict(embedding_dim=2, batch_size=64, learning_rate=0.05, epochs=2)
    base.update(overrides)
    return DelayModel(pretrained, DelayConfig(**base), np.random.default_rng(seed))


class TestPoolSequence:
    def table(self):
        t = ad.Parameter("t", np.array([[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]]))
        return t, {"a": 1, "b": 2}

    def test_empty_sequence_is_zero(self):
        t, vocab = self.table()
        assert np.array_equal(pool_sequence((), t, vocab), np.zeros(2))

    def test_single_id(self):
        t, vocab = self.table()
        assert np.array_equal(pool_sequence(("a",), t, vocab), [1.0, 2.0])

    def test_two_ids_mean(self):
        t, vocab = self.table()
        assert np.array_equal(pool_sequence(("a", "b"), t, vocab), [2.0, 3.0])

    def test_unknown_id_uses_reserved_row(self):
        t, vocab = self.table()
        assert np.array_equal(pool_sequence(("zzz",), t, vocab), [0.0, 0.0])


class TestGateForward:
    def test_zero_initialized_gate_is_half(self):
        rng = np.random.default_rng(0)
        gate = ad.MLP("g", [6, 4, 4], ["sigmoid", "sigmoid"], rng, zero_last=True)
        e = ad.constant(rng.normal(size=(3, 2)))
        out = gate_forward(gate, e, e, e)
        assert np.all(out.data == 0.5)

    def test_output_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(1)
        gate = ad.MLP("g", [6, 4, 4], ["sigmoid", "sigmoid"], rng)
        for _ in range(20):
            e = ad.constant(rng.normal(size=(2, 2)) * 10)
            out = gate_forward(gate, e, e, e)
            assert np.all((out.data > 0) & (out.data < 1))


class TestBuildGatedInput:
    def test_all_ones_gates_reduce_to_concat(self):
        rng = np.random.default_rng(2)
        h_cvr = ad.constant(rng.normal(size=(4, 3)))
        h_atc = ad.constant(rng.normal(size=(4, 3)))
        extra = ad.constant(rng.normal(size=(4, 2)))
        ones = ad.constant(np.ones((4, 3)))
        gated = build_gated_input(h_cvr, h_atc, ones, ones, [extra])
        plain = build_gated_input(h_cvr, h_atc, None, None, [extra])
        assert np.array_equal(gated.data, plain.data)
        assert np.array_equal(
            plain.data, np.concatenate([h_cvr.data, h_atc.data, extra.data], axis=1))

    def test_zero_gates_silence_transfer(self):
        rng = np.random.default_rng(3)
        h_cvr = ad.constant(rng.normal(size=(2, 3)))
        h_atc = ad.constant(rng.normal(size=(2, 3)))
        extra = ad.constant(rng.normal(size=(2, 2)))
        zeros = ad.constant(np.zeros((2, 3)))
        out = build_gated_input(h_cvr, h_atc, zeros, zeros, [extra])
        assert np.all(out.data[:, :6] == 0.0)
        assert np.array_equal(out.data[:, 6:], extra.data)


class TestForward:
    def test_additивity_to_machine_precision(self, setup):
        _, pretrained, data = setup
        model = make_model(pretrained)
        pred = model.forward(data.take(np.arange(50)))
        gap = pred.p_all_raw.data - pred.p_delay.data - pred.p_ori_cvr.data
        assert np.max(np.abs(gap)) < 1e-12

    def test_untrained_delay_head_outputs_half(self, setup):
        _, pretrained, data = setup
        model = make_model(pretrained)
        pred = model.forward(data.take(np.arange(10)))
        assert np.all(pred.p_delay.data == 0.5)
        assert np.allclose(pred.p_all_raw.data, pred.p_ori_cvr.data + 0.5)

    def test_forced_head_composition(self, setup):
        # Delay head forced to emit 0.1: p_all must be p_base + 0.1.
        _, pretrained, data = setup
        model = make_model(pretrained)
        model.head.biases[0].data[...] = math.log(0.1 / 0.9)
        pred = model.forward(data.take(np.arange(10)))
        assert np.allclose(pred.p_delay.data, 0.1, atol=1e-12)
        assert np.allclose(pred.p_all_raw.data, pred.p_ori_cvr.data + 0.1, atol=1e-12)

    def test_deterministic(self, setup):
        _, pretrained, data = setup
        model = make_model(pretrained)
        batch = data.take(np.arange(20))
        a = model.forward(batch)
        b = model.forward(batch)
        assert np.array_equal(a.p_delay.data, b.p_delay.data)

    def test_gates_disabled_equals_ones_gates(self, setup):
        _, pretrained, data = setup
        gated = make_model(pretrained, use_gates=True, seed=9)
        plain = make_model(pretrained, use_gates=False, seed=9)
        batch = data.take(np.arange(30))
        # Force every gate of the gated model to emit exactly 1.
        for gc, ga in gated.gates:
            for net in (gc, ga):
                net.weights[-1].data[...] = 0.0
                net.biases[-1].data[...] = 500.0  # sigmoid saturates to ~1
        a = gated.forward(batch)
        b = plain.forward(batch)
        assert np.allclose(a.p_delay.data, b.p_delay.data, atol=1e-12)

    def test_rejects_unfrozen_base(self, setup):
        world, _, _ = setup
        unfrozen = tiny_pretrained(world, epochs=0)
        for p in unfrozen.parameters():
            p.trainable = True
        unfrozen.frozen = False
        with pytest.raises(ConfigError):
            make_model(unfrozen)


class TestLoss:
    def pred(self, p_delay, p_all, p_ori=0.3):
        def col(v):
            return ad.constant(np.full((1, 1), v))
        return DelayPrediction(p_delay=col(p_delay), p_all_raw=col(p_all),
                               p_ori_cvr=col(p_ori))

    def test_weights_zero_leaves_delay_term_only(self):
        pred = self.pred(0.5, 0.8)
        total, parts = delay_loss(pred, np.array([1.0]), np.array([1.0]), None,
                                  lambda_all=0.0, lambda_cm=0.0)
        assert float(total.data) == pytest.approx(math.log(2), abs=1e-12)
        # lambda_all = 0 still evaluates the component for the breakdown.
        assert parts["all"] == pytest.approx(-math.log(0.8), abs=1e-12)

    def test_cm_component_vanishes_on_match(self):
        pred = self.pred(0.5, 0.8)
        _, parts = delay_loss(pred, np.array([1.0]), np.array([1.0]),
                              np.array([0.5]), lambda_all=1.0, lambda_cm=0.1)
        assert parts["cm"] == 0.0

    def test_hand_arithmetic(self):
        pred = self.pred(0.5, 0.8)
        total, parts = delay_loss(pred, np.array([1.0]), np.array([1.0]),
                                  np.array([0.4]), lambda_all=1.0, lambda_cm=0.1)
        want = math.log(2) + (-math.log(0.8)) + 0.1 * 0.01
        assert float(total.data) == pytest.approx(want, abs=1e-9)
        assert float(total.data) == pytest.approx(0.9173, abs=5e-5)

    def test_decomposition_identity(self, setup):
        _, pretrained, data = setup
        model = make_model(pretrained)
        batch = data.take(np.arange(40))
        mu1 = np.random.default_rng(0).uniform(0, 0.3, 40)
        total, parts = model.loss(model.forward(batch), batch, mu1)
        recomposed = parts["delay"] + model.config.lambda_all * parts["all"] \
            + model.config.lambda_cm * parts["cm"]
        assert abs(float(total.data) - recomposed) < 1e-12

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            DelayConfig(lambda_all=-1.0)
        pred = self.pred(0.5, 0.8)
        with pytest.raises(ConfigError):
            delay_loss(pred, np.array([1.0]), np.array([1.0]), None,
                       lambda_all=-0.5, lambda_cm=0.0)

    def test_missing_targets_rejected(self):
        pred = self.pred(0.5, 0.8)
        with pytest.raises(ConfigError):
            delay_loss(pred, np.array([1.0]), np.array([1.0]), None,
                       lambda_all=1.0, lambda_cm=0.1)

    def test_cm_on_atc_only_restricts_mean(self):
        p = ad.constant(np.array([[0.5], [0.5]]))
        pred = DelayPrediction(p_delay=p, p_all_raw=p, p_ori_cvr=p)
        mu1 = np.array([0.1, 0.5])
        a = np.array([1.0, 0.0])
        _, parts = delay_loss(pred, np.zeros(2), np.zeros(2), mu1,
                              lambda_all=0.0, lambda_cm=1.0,
                              cm_on_atc_only=True, a=a)
        assert parts["cm"] == pytest.approx(0.16, abs=1e-12)
        _, parts = delay_loss(pred, np.zeros(2), np.zeros(2), mu1,
                              lambda_all=0.0, lambda_cm=1.0)
        assert parts["cm"] == pytest.approx(0.08, abs=1e-12)


class TestStopGradientTotality:
    def test_no_gradient_reaches_frozen_base(self, setup):
        _, pretrained, data = setup
        model = make_model(pretrained)
        batch = data.take(np.arange(30))
        mu1 = np.full(30, 0.2)
        total, _ = model.loss(model.forward(batch), batch, mu1)
        grads = ad.backward(total, model.parameters())
        assert not any(name.startswith("pretrained/") for name in grads)
        # Even when explicitly asked about the frozen side: nothing flows.
        frozen_probe = [p for p in pretrained.parameters()]
        for p in frozen_probe:
            p.trainable = True
        try:
            grads = ad.backward(total, frozen_probe)
            for p in frozen_probe:
                assert np.all(grads[p.name] == 0.0), p.name
        finally:
            for p in frozen_probe:
                p.trainable = False

    def test_composite_loss_gradient_check(self, setup):
        _, pretrained, data = setup
        model = make_model(pretrained, seed=13)
        batch = data.take(np.arange(2))
        mu1 = np.array([0.15, 0.3])
        params = model.parameters()

        def build():
            total, _ = model.loss(model.forward(batch), batch, mu1)
            return total

        analytic = ad.backward(build(), params)
        numeric = finite_difference_grads(lambda: float(build().data), params)
        assert max_grad_mismatch(analytic, numeric) < 1e-4


class TestFinetune:
    def test_zero_epochs_is_identity(self, setup):
        _, pretrained, data = setup
        model = make_model(pretrained, epochs=0, lambda_cm=0.0)
        before = ad.param_hash(model.parameters())
        finetune(model, data, seed=3)
        assert ad.param_hash(model.parameters()) == before
        assert model.n_steps == 0

    def test_loss_descends(self, setup):
        _, pretrained, data = setup
        model = make_model(pretrained, lambda_cm=0.0, epochs=3)
        trace = finetune(model, data, seed=3)
        assert trace[-1] < trace[0]
        assert model.n_steps > 0

    def test_frozen_base_untouched(self, setup):
        _, pretrained, data = setup
        before = pretrained.param_hash()
        model = make_model(pretrained, lambda_cm=0.0)
        finetune(model, data, seed=4)
        assert pretrained.param_hash() == before

    def test_deterministic(self, setup):
        _, pretrained, data = setup
        runs = []
        for _ in range(2):
            model = make_model(pretrained, lambda_cm=0.0, seed=21)
            finetune(model, data, seed=9)
            runs.append(ad.param_hash(model.parameters()))
        assert runs[0] == runs[1]

    def test_requires_imputation_when_cm_active(self, setup):
        _, pretrained, data = setup
        model = make_model(pretrained, lambda_cm=0.1)
        with pytest.raises(ConfigError):
            finetune(model, data, imputation=None, seed=0)

    def test_gate_values_differ_across_users(self, setup):
        world, pretrained, data = setup
        model = make_model(pretrained, lambda_cm=0.0, epochs=3)
        finetune(model, data, seed=5)
        # Two users with different cart/purchase histories.
        rows = data.take(np.arange(data.n))
        busy = np.where(rows.atc_mask.sum(axis=1) > 0)[0]
        idle = np.where(rows.atc_mask.sum(axis=1) == 0)[0]
        assert busy.size and idle.size
        pred = model.forward(data.take(np.array([busy[0], idle[0]])))
        g = pred.gate_values[0][0].data
        assert not np.allclose(g[0], g[1])


class TestCheckpoint:
    def test_round_trip(self, setup, tmp_path):
        _, pretrained, data = setup
        model = make_model(pretrained, lambda_cm=0.0, epochs=1)
        finetune(model, data, seed=6)
        path = tmp_path / "delay.npz"
        model.save(path)
        back = DelayModel.load(path)
        assert ad.param_hash(back.parameters()) == ad.param_hash(model.parameters())
        assert back.pretrained.param_hash() == pretrained.param_hash()
        assert back.n_steps == model.n_steps
        a = model.predict(data.take(np.arange(20)))
        b = back.predict(data.take(np.arange(20)))
        assert np.array_equal(a["p_delay"], b["p_delay"])


class TestDiagnostics:
    def test_dump_writes_csv(self, setup, tmp_path):
        _, pretrained, data = setup
        model = make_model(pretrained)
        path = tmp_path / "diag.csv"
        dump_diagnostics(model, data.take(np.arange(10)), path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 11
        assert lines[0].startswith("index,p_ori_cvr,p_delay,p_all_raw,gate_")
