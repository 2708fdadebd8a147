import dataclasses
import math
from unittest import TestCase

import numpy as np
import pytest

from fedlora.data import Example, TaskSpec, generate, pooled_test
from fedlora.errors import InputError, ScheduleError, ShapeError
from fedlora.evalkit import accuracy
from fedlora.fedproto import FedConfig, build_base_model
from fedlora.linalg import derive_seed
from fedlora.lora_model import (
    ALL_TARGETS,
    AdapterPair,
    AdapterSet,
    BaseModel,
    ModelDims,
    ScalingMode,
    accumulate,
    adapted_matrix,
    forward,
    init_adapters,
    lora_scale,
    loss_and_grads,
    predict,
    pretrain_base,
    train_step,
)
from fedlora.optimization import OptimizerState, adamw_update

from .utils import slow


SMALL = ModelDims(vocab=10, d=4, h=8, classes=3, seq_len=5)


def _random_adapters(dims, seed, rank=2, alpha=4.0):
    """LoRA adapters on every target with non-zero B, so that every factor receives a gradient."""
    adapters = init_adapters(dims, rank=rank, alpha=alpha, seed=seed)
    rng = np.random.default_rng(seed)
    return adapters.map(lambda value: value if value.any() else 0.5 * rng.normal(size=value.shape))


def _batch(dims, seed, size=3):
    rng = np.random.default_rng(seed + 1000)
    return [
        Example(tokens=rng.integers(0, dims.vocab, size=dims.seq_len), label=int(rng.integers(0, dims.classes)))
        for _ in range(size)
    ]


class TestAdapters(TestCase):
    def test_scale(self):
        self.assertEqual(lora_scale(32, 8), 4.0)
        self.assertEqual(lora_scale(32, 8, ScalingMode.ALPHA), 32.0)

    def test_zero_b_leaves_base(self):
        base = np.random.default_rng(0).normal(size=(4, 3))
        pair = AdapterPair("q", a=np.ones((2, 3)), b=np.zeros((4, 2)), alpha=4.0)
        np.testing.assert_array_equal(adapted_matrix(base, pair), base)

    def test_hand_arithmetic(self):
        pair = AdapterPair("q", a=[[2.0]], b=[[3.0]], alpha=2.0)
        np.testing.assert_array_equal(adapted_matrix([[1.0]], pair), [[13.0]])

    def test_matches_composition(self):
        rng = np.random.default_rng(1)
        base = rng.normal(size=(4, 3))
        pair = AdapterPair("up", a=rng.normal(size=(2, 3)), b=rng.normal(size=(4, 2)), alpha=6.0)
        np.testing.assert_allclose(adapted_matrix(base, pair), base + 3.0 * (pair.b @ pair.a), rtol=0, atol=1e-12)

    def test_shape_errors(self):
        pair = AdapterPair("q", a=np.ones((2, 3)), b=np.ones((4, 2)), alpha=4.0)
        with self.assertRaises(ShapeError):
            adapted_matrix(np.ones((3, 3)), pair)
        with self.assertRaises(ShapeError):
            AdapterPair("q", a=np.ones((2, 3)), b=np.ones((4, 3)), alpha=4.0)
        with self.assertRaises(ShapeError):
            AdapterSet.from_pairs([pair, AdapterPair("k", a=np.ones((1, 3)), b=np.ones((4, 1)), alpha=4.0)])

    def test_init_is_zero_update(self):
        adapters = init_adapters(SMALL, rank=2, seed=3)
        self.assertEqual(adapters.targets, ALL_TARGETS)
        for pair in adapters:
            self.assertEqual(pair.shape, SMALL.target_shape(pair.target))
            self.assertFalse(pair.delta().any())
        np.testing.assert_array_equal(init_adapters(SMALL, rank=2, seed=3)["v"].a, adapters["v"].a)

    def test_parameters_are_read_only(self):
        adapters = init_adapters(SMALL, rank=2, seed=3)
        with self.assertRaises(ValueError):
            adapters["q"].a[0, 0] = 1.0


class TestForward(TestCase):
    def setUp(self):
        self.model = BaseModel.initialize(SMALL, seed=0)
        self.tokens = np.array([[1, 2, 3, 4, 5], [9, 0, 0, 7, 1]])

    def test_zero_update_equivalence(self):
        adapters = init_adapters(SMALL, rank=2, seed=1)
        np.testing.assert_array_equal(
            forward(self.model, adapters, self.tokens).logits, forward(self.model, AdapterSet(), self.tokens).logits
        )

    def test_dropout_determinism(self):
        adapters = _random_adapters(SMALL, seed=2)
        first = forward(self.model, adapters, self.tokens, dropout_seed=11, dropout=0.5).logits
        second = forward(self.model, adapters, self.tokens, dropout_seed=11, dropout=0.5).logits
        third = forward(self.model, adapters, self.tokens, dropout_seed=12, dropout=0.5).logits
        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.array_equal(first, third))
        # no seed, no dropout
        np.testing.assert_array_equal(
            forward(self.model, adapters, self.tokens, dropout=0.5).logits,
            forward(self.model, adapters, self.tokens, dropout=0.0).logits,
        )

    def test_single_sequence(self):
        adapters = _random_adapters(SMALL, seed=2)
        single = forward(self.model, adapters, self.tokens[1]).logits
        self.assertEqual(single.shape, (SMALL.classes,))
        np.testing.assert_allclose(single, forward(self.model, adapters, self.tokens).logits[1], atol=1e-12)

    def test_hand_unrolled_oracle(self):
        dims = ModelDims(vocab=3, d=2, h=3, classes=2, seq_len=1)
        model = BaseModel.initialize(dims, seed=5)
        token = 2

        def silu(x):
            return x / (1.0 + np.exp(-x))

        x0 = model.embed[token]
        # one position: attention weights are 1
        v = model.wv @ x0
        x1 = x0 + model.wo @ v
        act = silu(model.w_gate @ x1) * (model.w_up @ x1)
        x2 = x1 + model.w_down @ act
        expected = model.w_head @ x2
        np.testing.assert_allclose(forward(model, AdapterSet(), [token]).logits, expected, rtol=0, atol=1e-10)

    def test_out_of_vocabulary(self):
        with self.assertRaises(InputError):
            forward(self.model, AdapterSet(), [1, 2, 3, 4, SMALL.vocab])
        with self.assertRaises(InputError):
            forward(self.model, AdapterSet(), [1, 2, 3])


class TestLossAndGrads(TestCase):
    def test_uniform_logits(self):
        model = BaseModel.initialize(SMALL, seed=0)
        model = dataclasses.replace(model, w_head=np.zeros((SMALL.classes, SMALL.d)))
        result = loss_and_grads(model, init_adapters(SMALL, rank=2), _batch(SMALL, 0, size=1))
        self.assertAlmostEqual(result.loss, math.log(SMALL.classes), places=12)

    def test_empty_batch(self):
        model = BaseModel.initialize(SMALL, seed=0)
        with self.assertRaises(InputError):
            loss_and_grads(model, init_adapters(SMALL, rank=2), [])

    def test_finite_differences(self):
        eps = 1e-5
        for seed in range(20):
            model = BaseModel.initialize(SMALL, seed=seed)
            adapters = _random_adapters(SMALL, seed=seed)
            batch = _batch(SMALL, seed)
            analytic = loss_and_grads(model, adapters, batch).grads.parameters()
            params = adapters.parameters()
            for name, value in params.items():
                numeric = np.zeros_like(value)
                for index in np.ndindex(value.shape):
                    shifted = {}
                    for sign in (1.0, -1.0):
                        bumped = np.array(value)
                        bumped[index] += sign * eps
                        shifted[sign] = loss_and_grads(
                            model, adapters.with_parameters({**params, name: bumped}), batch
                        ).loss
                    numeric[index] = (shifted[1.0] - shifted[-1.0]) / (2 * eps)
                np.testing.assert_allclose(
                    analytic[name], numeric, rtol=1e-4, atol=1e-7, err_msg=f"seed {seed}, parameter {name}"
                )

    def test_duplicated_batch(self):
        model = BaseModel.initialize(SMALL, seed=1)
        adapters = _random_adapters(SMALL, seed=1)
        batch = _batch(SMALL, 1, size=4)
        once = loss_and_grads(model, adapters, batch)
        twice = loss_and_grads(model, adapters, [example for example in batch for _ in range(2)])
        self.assertAlmostEqual(once.loss, twice.loss, delta=1e-12)
        for name, grad in once.grads.parameters().items():
            np.testing.assert_allclose(twice.grads.parameters()[name], grad, rtol=0, atol=1e-12)


class TestTrainStep(TestCase):
    def test_zero_gradients_fixed_point(self):
        adapters = _random_adapters(SMALL, seed=4)
        opt = OptimizerState(lr=0.1, total_steps=3)
        updated, _ = train_step(adapters, adapters.zeros_like(), opt)
        for name, value in adapters.parameters().items():
            np.testing.assert_array_equal(updated.parameters()[name], value)

    def test_first_adamw_step(self):
        lr, grad, weight_decay, eps = 0.1, 0.5, 0.01, 1e-8
        opt = OptimizerState(lr=lr, total_steps=10, weight_decay=weight_decay, eps=eps)
        updated = adamw_update({"p": np.array([[1.0]])}, {"p": np.array([[grad]])}, opt)
        # bias-corrected first step: m_hat = g, v_hat = g^2
        expected = 1.0 * (1.0 - lr * weight_decay) - lr * grad / (abs(grad) + eps)
        self.assertAlmostEqual(float(updated["p"][0, 0]), expected, places=12)
        self.assertEqual(opt.step, 1)
        self.assertAlmostEqual(opt.current_lr(), lr * 0.9, places=12)

    def test_accumulation_equivalence(self):
        model = BaseModel.initialize(SMALL, seed=2)
        adapters = _random_adapters(SMALL, seed=2)
        batch = _batch(SMALL, 2, size=2)
        micro = [loss_and_grads(model, adapters, [example]).grads for example in batch]
        accumulated, _ = train_step(adapters, accumulate(micro), OptimizerState(lr=0.01, total_steps=5), 2)
        full, _ = train_step(adapters, loss_and_grads(model, adapters, batch).grads, OptimizerState(lr=0.01, total_steps=5))
        for name, value in full.parameters().items():
            np.testing.assert_allclose(accumulated.parameters()[name], value, rtol=0, atol=1e-10)

    def test_schedule_exhausted(self):
        adapters = _random_adapters(SMALL, seed=3)
        opt = OptimizerState(lr=0.1, total_steps=1)
        adapters, opt = train_step(adapters, adapters.zeros_like(), opt)
        with self.assertRaises(ScheduleError):
            train_step(adapters, adapters.zeros_like(), opt)
        with self.assertRaises(ScheduleError):
            OptimizerState(lr=0.1, total_steps=0)

    def test_base_stays_frozen(self):
        model = BaseModel.initialize(SMALL, seed=3)
        before = model.to_bytes()
        adapters = _random_adapters(SMALL, seed=3)
        opt = OptimizerState(lr=0.05, total_steps=5)
        for step in range(5):
            grads = loss_and_grads(model, adapters, _batch(SMALL, step), dropout_seed=step).grads
            adapters, opt = train_step(adapters, grads, opt)
        self.assertEqual(model.to_bytes(), before)
        with self.assertRaises(ValueError):
            model.wq[0, 0] = 0.0


TINY_TASK = TaskSpec(vocab=24, classes=3, seq_len=6, clients=2, client_sizes=(40, 40), seed=3)


class TestPretrain(TestCase):
    def test_determinism(self):
        dims = ModelDims(d=4, h=8)
        first = pretrain_base(TINY_TASK, seed=1, dims=dims, steps=10)
        second = pretrain_base(TINY_TASK, seed=1, dims=dims, steps=10)
        self.assertEqual(first.to_bytes(), second.to_bytes())
        self.assertEqual(first.dims, ModelDims(vocab=24, d=4, h=8, classes=3, seq_len=6))

    def test_zero_steps_is_initialization(self):
        model = pretrain_base(TINY_TASK, seed=1, dims=ModelDims(d=4, h=8), steps=0)
        self.assertEqual(model.to_bytes(), BaseModel.initialize(model.dims, seed=derive_seed(1, 0)).to_bytes())

    def test_pretraining_lowers_loss(self):
        dims = ModelDims(d=8, h=16)
        examples = pooled_test(generate(TINY_TASK))
        losses = [
            loss_and_grads(pretrain_base(TINY_TASK, seed=0, dims=dims, steps=steps), AdapterSet(), examples).loss
            for steps in (0, 150)
        ]
        self.assertLess(losses[1], losses[0])

    @slow
    def test_untrained_accuracy_near_chance(self):
        task = TaskSpec(
            vocab=64, classes=4, seq_len=12, clients=1, client_sizes=(3000,), dialect_shift=0.0, label_skew=0.0
        )
        model = pretrain_base(task, seed=0, dims=ModelDims(d=16, h=32), steps=0)
        test = generate(task)[0].train
        self.assertLess(abs(accuracy(model, AdapterSet(), test) - 0.25), 0.15)

    @slow
    def test_default_budget_doubles_chance_accuracy(self):
        config = FedConfig()
        model = build_base_model(config)
        test = pooled_test(generate(config.task))
        self.assertGreater(accuracy(model, AdapterSet(), test), 2.0 / config.task.classes)


@pytest.mark.parametrize("classes", [2, 3, 5])
def test_constant_predictor_accuracy(classes):
    dims = ModelDims(vocab=10, d=4, h=8, classes=classes, seq_len=5)
    model = dataclasses.replace(BaseModel.initialize(dims, seed=0), w_head=np.zeros((classes, dims.d)))
    examples = [Example(tokens=np.arange(5) % 10, label=label) for label in range(classes) for _ in range(4)]
    assert np.all(predict(model, AdapterSet(), np.stack([e.tokens for e in examples])) == 0)
    assert accuracy(model, AdapterSet(), examples) == pytest.approx(1.0 / classes)
