import numpy as np
import pytest

from conftest import linear_model
from qaalab.attacks import AttackSpec, pgd
from qaalab.core import FULL, QUANTIZED, WEIGHTS_ONLY, NumericFault, build_model
from qaalab.harness.data import synth_dataset
from qaalab.quant import fake_quantize, quantize
from qaalab.training import (SGD, CheckpointCollection, DivergedTraining, TrainConfig, TrainLog, accuracy,
                             adv_train, calibrate_model, finetune_qaa, ptq_quantize, qat_train, train_standard,
                             weight_hash)


@pytest.fixture(scope="module")
def two_blobs():
    return synth_dataset(2, 2000, 8, seed=11, amplitude=0.2)


@pytest.fixture(scope="module")
def tiny():
    return synth_dataset(10, 256, 8, seed=5, amplitude=0.2)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(batch_size=0), dict(epochs=-1), dict(learning_rate=0),
                                     dict(momentum=1.0), dict(weight_decay=-1)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestSGD:
    def test_momentum_and_decay(self):
        m = linear_model(np.array([[1.0, -2.0]]))
        opt = SGD(m, lr=0.1, momentum=0.9, weight_decay=0.5)
        g = {"0.weight": np.array([[1.0, 1.0]]), "0.bias": np.array([0.0])}
        opt.step(g)
        # d = g + wd * p ; v = d ; p -= lr * v
        np.testing.assert_allclose(m.layers[0].params["weight"], [[1 - 0.1 * 1.5, -2 - 0.1 * 0.0]])
        w1 = m.layers[0].params["weight"].copy()
        opt.step(g)
        d = g["0.weight"] + 0.5 * w1
        v = 0.9 * np.array([[1.5, 0.0]]) + d
        np.testing.assert_allclose(m.layers[0].params["weight"], w1 - 0.1 * v)

    def test_only_given_keys_move(self):
        m = build_model("mlp3", bits=4)
        before = {k: v.copy() for k, v in m.named_parameters()}
        SGD(m, 0.1).step({"1.weight": np.ones_like(before["1.weight"])})
        after = dict(m.named_parameters())
        assert not np.array_equal(after["1.weight"], before["1.weight"])
        assert all(np.array_equal(after[k], before[k]) for k in before if k != "1.weight")


class TestStandard:
    def test_zero_epochs_is_init(self, tiny):
        m = train_standard("mlp3", tiny, TrainConfig(epochs=0, seed=4))
        assert weight_hash(m) == weight_hash(build_model("mlp3", seed=4))

    def test_separable_blobs(self, two_blobs):
        m = train_standard("mlp3", two_blobs, TrainConfig(epochs=5, seed=0))
        assert accuracy(m, two_blobs.images, two_blobs.labels) >= 95.0

    def test_deterministic(self, tiny):
        a = train_standard("convnet_a", tiny, TrainConfig(epochs=1, seed=2))
        b = train_standard("convnet_a", tiny, TrainConfig(epochs=1, seed=2))
        assert weight_hash(a) == weight_hash(b)

    def test_requires_full_precision(self, tiny):
        with pytest.raises(ValueError):
            train_standard("mlp3", tiny, TrainConfig(bits=4))

    def test_divergence_detected(self, tiny):
        with pytest.raises((DivergedTraining, NumericFault)), np.errstate(over="ignore", invalid="ignore"):
            train_standard("mlp3", tiny, TrainConfig(epochs=3, learning_rate=1e6, seed=0))

    def test_train_log(self, tiny, tmp_path):
        log = TrainLog(path=tmp_path / "log.jsonl")
        train_standard("mlp3", tiny, TrainConfig(epochs=2), train_log=log)
        assert [e["epoch"] for e in log.epochs] == [0, 1]
        assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2
        assert set(log.states) == {"wFaF"}


class TestQAT:
    def test_weights_on_grid(self, tiny):
        m = qat_train("convnet_a", tiny, TrainConfig(epochs=1, bits=3))
        for layer in m.layers:
            if layer.weight_qp is not None:
                qp = layer.weight_qp
                fq = fake_quantize(layer.params["weight"], qp).astype(np.float64)
                k = quantize(layer.params["weight"], qp)
                np.testing.assert_allclose(fq, qp.scale * k + qp.bias, rtol=1e-6, atol=1e-9)

    def test_32_bit_matches_standard(self, tiny):
        a = qat_train("convnet_a", tiny, TrainConfig(epochs=1, bits=32, seed=1))
        b = train_standard("convnet_a", tiny, TrainConfig(epochs=1, seed=1))
        assert weight_hash(a) == weight_hash(b)

    def test_two_bit_close_to_full_precision(self, small_zoo, blobs):
        _, test = blobs
        m32, m2 = small_zoo
        assert accuracy(m2, test.images, test.labels) >= accuracy(m32, test.images, test.labels) - 10

    def test_rejects_bitwidth(self, tiny):
        with pytest.raises(ValueError):
            qat_train("mlp3", tiny, TrainConfig(bits=12))

    def test_quant_params_learned(self, tiny):
        m = build_model("mlp3", bits=4)
        calibrate_model(m, tiny.images[:64], "mse")
        before = [qp.scale for _, qp in m.quant_sites()]
        m2 = qat_train("mlp3", tiny, TrainConfig(epochs=1, bits=4))
        after = [qp.scale for _, qp in m2.quant_sites()]
        assert before != after and all(s >= 1e-8 for s in after)


class TestFinetuneQAA:
    def test_state_schedule(self, small_zoo, tiny):
        _, m2 = small_zoo
        log = TrainLog()
        finetune_qaa(m2, tiny.subset(0, 256), TrainConfig(epochs=1, batch_size=64, learning_rate=1e-3), train_log=log)
        assert log.states == ["wQaF", "wQaQ", "wQaF", "wQaQ"]

    def test_activation_params_frozen_on_full_batch(self, small_zoo, tiny):
        _, m2 = small_zoo
        out = finetune_qaa(m2, tiny.subset(0, 64), TrainConfig(epochs=1, batch_size=64, learning_rate=1e-2))
        for layer_in, layer_out in zip(m2.layers, out.layers):
            if layer_in.act_qp is not None:
                assert layer_out.act_qp == layer_in.act_qp
        w_in = [l.weight_qp.scale for l in m2.layers if l.weight_qp is not None]
        w_out = [l.weight_qp.scale for l in out.layers if l.weight_qp is not None]
        assert w_in != w_out

    def test_activation_params_move_on_quant_batch(self, small_zoo, tiny):
        _, m2 = small_zoo
        out = finetune_qaa(m2, tiny.subset(0, 128), TrainConfig(epochs=1, batch_size=64, learning_rate=1e-2))
        moved = [a.act_qp != b.act_qp for a, b in zip(m2.layers, out.layers) if a.act_qp is not None]
        assert any(moved)

    def test_accuracy_preserved_in_both_states(self, small_zoo, blobs):
        train, test = blobs
        _, m2 = small_zoo
        base = accuracy(m2, test.images, test.labels, QUANTIZED)
        out = finetune_qaa(m2, train, TrainConfig(epochs=1, learning_rate=1e-3, bits=2))
        for state in (WEIGHTS_ONLY, QUANTIZED):
            # the full-precision-activation state may gain; neither may lose more than 5 points
            assert accuracy(out, test.images, test.labels, state) >= base - 5

    def test_checkpoints(self, small_zoo, tiny):
        _, m2 = small_zoo
        ckpts = CheckpointCollection()
        finetune_qaa(m2, tiny, TrainConfig(epochs=1, batch_size=32, learning_rate=1e-3), checkpoints=ckpts,
                     num_checkpoints=4)
        assert len(ckpts) == 4
        assert len({weight_hash(c) for c in ckpts}) == 4

    def test_needs_quantizer_sites(self, tiny):
        with pytest.raises(ValueError):
            finetune_qaa(linear_model(np.ones((10, 64))), tiny, TrainConfig())


class TestPTQ:
    def test_weights_untouched(self, small_zoo, tiny):
        m32, _ = small_zoo
        for method in ("minmax", "mse"):
            q = ptq_quantize(m32, tiny, 4, method)
            for (k, a), (_, b) in zip(m32.named_parameters(), q.named_parameters()):
                assert np.max(np.abs(a - b)) == 0, k
            assert q.native_state() == QUANTIZED

    def test_32_bit_is_identity(self, small_zoo, tiny):
        m32, _ = small_zoo
        q = ptq_quantize(m32, tiny, 32)
        x = tiny.images[:16]
        assert q.forward(x, QUANTIZED).logits.tobytes() == m32.forward(x, FULL).logits.tobytes()

    def test_constant_activations_hit_floor(self):
        m = linear_model(np.ones((2, 3)), dtype=np.float32)
        m.layers.append(__import__("qaalab.core", fromlist=["ReLU"]).ReLU())
        m = type(m)("lin_relu", (3,), m.layers, 2)
        q = ptq_quantize(m, np.full((8, 3), 0.5, np.float32), 4)
        act = q.layers[1].act_qp
        assert act.scale == 1e-8 and act.bias == pytest.approx(1.5)

    def test_empty_calibration(self, small_zoo):
        with pytest.raises(ValueError):
            ptq_quantize(small_zoo[0], np.zeros((0, 1, 8, 8), np.float32), 4)


class TestAdversarialTraining:
    def test_zero_budget_is_standard(self, tiny):
        a = adv_train("mlp3", tiny, TrainConfig(epochs=1, seed=3), AttackSpec("pgd", 0.0, 3))
        b = train_standard("mlp3", tiny, TrainConfig(epochs=1, seed=3))
        assert weight_hash(a) == weight_hash(b)

    def test_deterministic(self, tiny):
        spec = AttackSpec("pgd", 8 / 255, 3)
        a = adv_train("mlp3", tiny, TrainConfig(epochs=1, seed=3), spec)
        b = adv_train("mlp3", tiny, TrainConfig(epochs=1, seed=3), spec)
        assert weight_hash(a) == weight_hash(b)

    def test_more_robust_than_standard(self):
        spec = AttackSpec("pgd", 8 / 255, 5)
        wins = 0
        for seed in range(3):
            data = synth_dataset(10, 2000, 8, seed=seed, amplitude=0.2)
            test = synth_dataset(10, 300, 8, seed=seed + 1000, amplitude=0.2, pattern_seed=seed)
            cfg = TrainConfig(epochs=4, seed=seed)
            std = train_standard("convnet_a", data, cfg)
            rob = adv_train("convnet_a", data, cfg, spec)
            robust_acc = [accuracy(m, pgd(m, test.images, test.labels, spec).x_adv, test.labels) for m in (std, rob)]
            wins += robust_acc[1] > robust_acc[0]
        assert wins == 3

    def test_requires_pgd(self, tiny):
        with pytest.raises(ValueError):
            adv_train("mlp3", tiny, TrainConfig(), AttackSpec("mim"))
