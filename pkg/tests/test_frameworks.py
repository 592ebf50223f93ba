import numpy as np
import pytest

from airl import encoder
from airl.errors import ConfigError, DimensionError
from airl.frameworks import (
    FrameworkConfig,
    MemoryQueue,
    byol_loss,
    compute_loss_and_grads,
    contrastive_loss,
    ema_update,
    init_siamese_state,
    momentum_at,
    step_loss,
    training_step,
)
from airl.numerics import Rng, finite_diff_grad, relative_error
from airl.optim import LrSchedule, Optimizer, SgdConfig


def unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def tiny_state(kind, seed=0, total_steps=10, queue_rows=12, **overrides):
    defaults = dict(
        input_dim=12, backbone_hidden=6, backbone_out=6,
        projector_hidden=6, projector_out=5, queue_size=16,
    )
    defaults.update(overrides)
    cfg = FrameworkConfig.preset(kind, **defaults)
    state = init_siamese_state(cfg, Rng(seed).child("init"), total_steps)
    if state.queue is not None and queue_rows:
        state.queue.enqueue(unit_rows(Rng(seed).child("warm"), queue_rows,
                                      cfg.projector_out))
    return cfg, state


class TestContrastiveLoss:
    def test_empty_queue_gives_exactly_zero(self):
        q = unit_rows(Rng(0), 3, 4)
        k = unit_rows(Rng(1), 3, 4)
        loss, grad = contrastive_loss(q, k, np.zeros((0, 4)), 0.2)
        assert loss == 0.0
        assert np.allclose(grad, 0.0, atol=1e-15)

    def test_aligned_positive_orthogonal_negative(self):
        # q.k+ = 1, q.k- = 0, tau = 0.2: loss = log(1 + e^-5)
        q = np.array([[1.0, 0.0]])
        k = np.array([[1.0, 0.0]])
        neg = np.array([[0.0, 1.0]])
        loss, _ = contrastive_loss(q, k, neg, 0.2)
        assert abs(loss - np.log1p(np.exp(-5.0))) < 1e-9

    def test_equal_logits_give_ln2(self):
        q = np.array([[1.0, 0.0]])
        k = np.array([[0.6, 0.8]])
        neg = np.array([[0.6, -0.8]])  # same dot with q as the positive
        loss, _ = contrastive_loss(q, k, neg, 0.2)
        assert abs(loss - np.log(2.0)) < 1e-12

    def test_invariant_to_negative_order(self):
        rng = Rng(2)
        q = unit_rows(rng.child("q"), 4, 6)
        k = unit_rows(rng.child("k"), 4, 6)
        neg = unit_rows(rng.child("n"), 9, 6)
        loss_a, _ = contrastive_loss(q, k, neg, 0.2)
        perm = Rng(3).permutation(9)
        loss_b, _ = contrastive_loss(q, k, neg[perm], 0.2)
        assert abs(loss_a - loss_b) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = Rng(4)
        q = unit_rows(rng.child("q"), 3, 5)
        k = unit_rows(rng.child("k"), 3, 5)
        neg = unit_rows(rng.child("n"), 7, 5)
        _, grad = contrastive_loss(q, k, neg, 0.2)
        fd = finite_diff_grad(
            lambda v: contrastive_loss(v, k, neg, 0.2)[0], q
        )
        assert relative_error(grad, fd) < 1e-8

    def test_temperature_must_be_positive(self):
        q = unit_rows(Rng(0), 2, 3)
        with pytest.raises(ConfigError):
            contrastive_loss(q, q, np.zeros((0, 3)), 0.0)


class TestByolLoss:
    def test_identical_rows_give_zero(self):
        q = unit_rows(Rng(0), 3, 4)
        loss, grad = byol_loss(q, q.copy())
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_orthogonal_rows_give_two(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        k = np.array([[0.0, 1.0], [1.0, 0.0]])
        loss, _ = byol_loss(q, k)
        assert loss == 2.0

    def test_three_four_five_case(self):
        loss, _ = byol_loss(np.array([[0.6, 0.8]]), np.array([[1.0, 0.0]]))
        assert abs(loss - 0.8) < 1e-12
        assert abs(loss - (2.0 - 2.0 * 0.6)) < 1e-12

    def test_unit_row_identity_with_dot_form(self):
        rng = Rng(5)
        q = unit_rows(rng.child("q"), 6, 8)
        k = unit_rows(rng.child("k"), 6, 8)
        loss, _ = byol_loss(q, k)
        dot_form = 2.0 - 2.0 * float(np.mean(np.sum(q * k, axis=1)))
        assert abs(loss - dot_form) < 1e-12

    def test_gradient(self):
        rng = Rng(6)
        q = unit_rows(rng.child("q"), 4, 5)
        k = unit_rows(rng.child("k"), 4, 5)
        _, grad = byol_loss(q, k)
        fd = finite_diff_grad(lambda v: byol_loss(v, k)[0], q)
        assert relative_error(grad, fd) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            byol_loss(np.zeros((2, 3)), np.zeros((3, 2)))


class TestMomentumSchedule:
    def test_endpoints_exact(self):
        assert momentum_at(0, 100, 0.99, "cosine_ascend") == 0.99
        assert momentum_at(100, 100, 0.99, "cosine_ascend") == 1.0

    def test_midpoint(self):
        assert abs(momentum_at(50, 100, 0.99, "cosine_ascend") - 0.995) < 1e-12

    def test_constant(self):
        assert momentum_at(7, 10, 0.999, "constant") == 0.999

    def test_zero_total_rejected(self):
        with pytest.raises(ConfigError):
            momentum_at(0, 0, 0.99, "cosine_ascend")


class TestMemoryQueue:
    def test_fifo_overwrites_oldest(self):
        queue = MemoryQueue(4, 2)
        a, b, c, d, e, f = [
            np.array([[np.cos(t), np.sin(t)]]) for t in range(6)
        ]
        queue.enqueue(np.vstack([a, b]))
        queue.enqueue(np.vstack([c, d]))
        queue.enqueue(np.vstack([e, f]))
        contents = {tuple(np.round(row, 12)) for row in queue.contents()}
        expected = {tuple(np.round(row[0], 12)) for row in (c, d, e, f)}
        assert contents == expected

    def test_empty_enqueue_is_identity(self):
        queue = MemoryQueue(4, 3)
        queue.enqueue(unit_rows(Rng(0), 2, 3))
        before = queue.contents()
        queue.enqueue(np.zeros((0, 3)))
        assert np.array_equal(queue.contents(), before)

    def test_rows_stay_unit_norm(self):
        queue = MemoryQueue(8, 4)
        queue.enqueue(unit_rows(Rng(1), 5, 4))
        norms = np.linalg.norm(queue.contents(), axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-9

    def test_overfull_batch_rejected(self):
        queue = MemoryQueue(2, 3)
        with pytest.raises(ConfigError):
            queue.enqueue(unit_rows(Rng(0), 3, 3))

    def test_non_unit_rows_rejected(self):
        queue = MemoryQueue(4, 3)
        with pytest.raises(ConfigError):
            queue.enqueue(2.0 * unit_rows(Rng(0), 2, 3))

    def test_fill_grows_to_capacity_and_stays(self):
        queue = MemoryQueue(6, 2)
        for step in range(5):
            queue.enqueue(unit_rows(Rng(step), 2, 2))
            assert queue.fill == min(2 * (step + 1), 6)


class TestEmaUpdate:
    def test_m_one_freezes_teacher(self):
        _, state = tiny_state("moco_v2")
        before = {k: v.copy() for k, v in state.teacher.tensors.items()}
        for name in state.student.tensors:
            state.student.tensors[name] += 1.0
        ema_update(state.teacher, state.student, 1.0)
        for name, value in state.teacher.tensors.items():
            assert np.array_equal(value, before[name])

    def test_closed_form_with_frozen_student(self):
        _, state = tiny_state("byol", seed=3)
        teacher0 = {k: v.copy() for k, v in state.teacher.tensors.items()}
        m, steps = 0.97, 12
        for _ in range(steps):
            ema_update(state.teacher, state.student, m)
        factor = m**steps
        for name, value in state.teacher.tensors.items():
            expected = (factor * teacher0[name]
                        + (1 - factor) * state.student.tensors[name])
            assert np.max(np.abs(value - expected)) < 1e-10


class TestTrainingStep:
    def make_batch(self, seed, n=4, d=12):
        rng = Rng(seed)
        return (rng.child("x1").random((n, d)),
                rng.child("x2").random((n, d)))

    def opt(self, epochs=10):
        return Optimizer(SgdConfig(lr=0.05), LrSchedule("cosine", 0.05,
                                                        total_epochs=epochs))

    @pytest.mark.parametrize("kind", ["moco_v2", "moco_v2_plus",
                                      "s_moco_v2_plus", "byol"])
    def test_teacher_gets_no_gradients(self, kind):
        cfg, state = tiny_state(kind)
        x1, x2 = self.make_batch(0)
        _, grads, _ = compute_loss_and_grads(state, x1, x2, cfg, Rng(1))
        assert set(grads) == set(state.student.tensors)

    def test_symmetric_loss_is_mean_of_directions(self):
        cfg, state = tiny_state("moco_v2_plus")
        x1, x2 = self.make_batch(1)
        loss, _, aux = compute_loss_and_grads(state, x1, x2, cfg, Rng(2))
        l1, l2 = aux["direction_losses"]
        assert loss == (l1 + l2) * 0.5

    def test_symmetric_sum_flag(self):
        cfg, state = tiny_state("moco_v2_plus", symmetric_sum=True)
        x1, x2 = self.make_batch(1)
        loss, _, aux = compute_loss_and_grads(state, x1, x2, cfg, Rng(2))
        l1, l2 = aux["direction_losses"]
        assert loss == l1 + l2

    def test_identical_views_make_directions_equal(self):
        # deterministic encoders (global BN both branches) + identical views
        cfg, state = tiny_state("moco_v2_plus", bn_mode="global")
        x, _ = self.make_batch(2)
        _, _, aux = compute_loss_and_grads(state, x, x.copy(), cfg, Rng(3))
        l1, l2 = aux["direction_losses"]
        assert abs(l1 - l2) < 1e-12

    def test_symmetric_enqueues_both_directions(self):
        cfg, state = tiny_state("moco_v2_plus", queue_rows=0)
        x1, x2 = self.make_batch(3)
        training_step(state, x1, x2, cfg, self.opt(), Rng(4))
        assert state.queue.fill == 2 * x1.shape[0]

    def test_asymmetric_enqueues_one_direction(self):
        cfg, state = tiny_state("moco_v2", queue_rows=0)
        x1, x2 = self.make_batch(3)
        training_step(state, x1, x2, cfg, self.opt(), Rng(4))
        assert state.queue.fill == x1.shape[0]

    def test_byol_has_no_queue(self):
        _, state = tiny_state("byol")
        assert state.queue is None

    def test_step_counter_and_metrics(self):
        cfg, state = tiny_state("byol")
        x1, x2 = self.make_batch(4)
        state, metrics = training_step(state, x1, x2, cfg, self.opt(), Rng(5))
        assert state.step == 1
        assert np.isfinite(metrics["loss"])
        assert metrics["queue_fill"] == 0

    def test_step_loss_is_reproducible(self):
        cfg, state = tiny_state("moco_v2")
        x1, x2 = self.make_batch(5)
        assert step_loss(state, x1, x2, cfg, Rng(6)) == \
            step_loss(state, x1, x2, cfg, Rng(6))

    @pytest.mark.parametrize("kind", ["moco_v2", "byol"])
    def test_full_step_gradients_match_finite_differences(self, kind):
        cfg, state = tiny_state(kind, seed=8)
        x1, x2 = self.make_batch(8)
        rng_key = Rng(9)
        _, grads, _ = compute_loss_and_grads(state, x1, x2, cfg, rng_key)
        names = sorted(state.student.tensors)
        analytic = np.concatenate([grads[n].ravel() for n in names])
        fd_parts = []
        for name in names:
            orig = state.student.tensors[name].copy()

            def f(arr, _name=name):
                state.student.tensors[_name][...] = arr
                return step_loss(state, x1, x2, cfg, rng_key)

            fd_parts.append(finite_diff_grad(f, orig).ravel())
            state.student.tensors[name][...] = orig
        assert relative_error(analytic, np.concatenate(fd_parts)) < 1e-4

    def test_stop_gradient_disabled_restricted_to_byol(self):
        with pytest.raises(ConfigError):
            FrameworkConfig.preset("moco_v2", stop_gradient=False)

    def test_stop_gradient_disabled_moves_both_sides(self):
        cfg, state = tiny_state("byol", stop_gradient=False,
                                predictor_placement="none")
        x1, x2 = self.make_batch(9)
        loss, grads, aux = compute_loss_and_grads(state, x1, x2, cfg, Rng(10))
        assert set(grads) == set(state.student.tensors)
        assert aux["teacher_feats"] is None
        # gradient check for the both-sided path
        names = sorted(state.student.tensors)
        analytic = np.concatenate([grads[n].ravel() for n in names])
        fd_parts = []
        for name in names:
            orig = state.student.tensors[name].copy()

            def f(arr, _name=name):
                state.student.tensors[_name][...] = arr
                return step_loss(state, x1, x2, cfg, Rng(10))

            fd_parts.append(finite_diff_grad(f, orig).ravel())
            state.student.tensors[name][...] = orig
        assert relative_error(analytic, np.concatenate(fd_parts)) < 1e-4
