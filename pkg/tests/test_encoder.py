import numpy as np
import pytest

from airl import encoder
from airl.encoder import (
    BN_GLOBAL,
    BN_SHUFFLED,
    EncoderParams,
    LayerSpec,
    backward,
    branch_specs,
    build_branch,
    forward,
    init_params,
    make_teacher,
)
from airl.errors import BatchTooSmallError, ConfigError, DimensionError
from airl.frameworks import FrameworkConfig
from airl.numerics import Rng, finite_diff_grad, matmul, relative_error


def tiny_cfg(**overrides):
    defaults = dict(
        input_dim=12, backbone_hidden=8, backbone_out=8,
        projector_hidden=8, projector_out=6,
    )
    defaults.update(overrides)
    return FrameworkConfig.preset("s_moco_v2_plus", **defaults)


def flat_grads(grads, names):
    return np.concatenate([grads[n].ravel() for n in names])


def encoder_fd_check(params, x, seed):
    """Whole-gradient check of a random linear functional of the output."""
    weights = Rng(seed).child("w").normal(size=(x.shape[0], params.out_dim))

    out, cache = forward(params, x, training=True)
    grads, _ = backward(cache, weights)
    names = sorted(params.tensors)
    analytic = flat_grads(grads, names)

    fd_parts = []
    for name in names:
        orig = params.tensors[name].copy()

        def f(arr, _name=name):
            params.tensors[_name][...] = arr
            value, _ = forward(params, x, training=True)
            return float(np.sum(value * weights))

        fd_parts.append(finite_diff_grad(f, orig).ravel())
        params.tensors[name][...] = orig
    return relative_error(analytic, np.concatenate(fd_parts))


class TestForward:
    def test_zero_depth_encoder_is_identity(self):
        params = EncoderParams(specs=())
        x = Rng(0).normal(size=(3, 5))
        out, _ = forward(params, x, training=True)
        assert np.array_equal(out, x)

    def test_single_linear_identity_weights(self):
        spec = (LayerSpec("linear", "lin", 4, 4, "backbone1", has_bias=True),)
        params = EncoderParams(specs=spec)
        params.tensors["lin.weight"] = np.eye(4)
        params.tensors["lin.bias"] = np.zeros(4)
        params.roles = {"lin.weight": "weight", "lin.bias": "bias"}
        x = Rng(1).normal(size=(3, 4))
        out, _ = forward(params, x, training=True)
        assert np.array_equal(out, x)

    def test_training_bn_rejects_batch_of_one(self):
        params = build_branch(tiny_cfg(), Rng(0))
        x = Rng(1).normal(size=(1, 12))
        for mode in (BN_GLOBAL, BN_SHUFFLED):
            with pytest.raises(BatchTooSmallError):
                forward(params, x, training=True, bn_mode=mode, rng=Rng(2))

    def test_batch_stats_normalize_before_affine(self):
        # Large input variance keeps the BN epsilon negligible.
        spec = (LayerSpec("batch_norm", "bn", 6, 6, "backbone1"),)
        params = init_params(spec, Rng(0))
        x = 20.0 * Rng(3).normal(size=(64, 6)) + 5.0
        out, _ = forward(params, x, training=True)  # affine is identity at init
        assert np.max(np.abs(out.mean(axis=0))) <= 1e-8
        assert np.max(np.abs(out.var(axis=0) - 1.0)) <= 1e-6

    def test_shuffled_equals_global_under_identity_permutation(self):
        params = build_branch(tiny_cfg(), Rng(0))
        x = Rng(1).normal(size=(4, 12))

        class IdentityPermRng:
            def permutation(self, n):
                return np.arange(n)

        global_out, _ = forward(params.copy(), x, training=True,
                                bn_mode=BN_GLOBAL)
        shuffled_out, _ = forward(params.copy(), x, training=True,
                                  bn_mode=BN_SHUFFLED, rng=IdentityPermRng())
        assert np.array_equal(global_out, shuffled_out)

    def test_shuffled_close_to_global_under_any_permutation(self):
        params = build_branch(tiny_cfg(), Rng(0))
        x = Rng(1).normal(size=(6, 12))
        a, _ = forward(params.copy(), x, training=True, bn_mode=BN_GLOBAL)
        b, _ = forward(params.copy(), x, training=True, bn_mode=BN_SHUFFLED,
                       rng=Rng(9))
        assert np.max(np.abs(a - b)) < 1e-10

    def test_eval_mode_is_pure(self):
        params = build_branch(tiny_cfg(), Rng(0))
        x = Rng(1).normal(size=(4, 12))
        running_before = {k: v.copy() for k, v in params.running.items()}
        out1, _ = forward(params, x, training=False)
        out2, _ = forward(params, x, training=False)
        assert np.array_equal(out1, out2)
        for key, value in params.running.items():
            assert np.array_equal(value, running_before[key])

    def test_training_updates_running_stats(self):
        params = build_branch(tiny_cfg(), Rng(0))
        before = params.running["backbone1_bn.mean"].copy()
        forward(params, Rng(1).normal(size=(4, 12)), training=True)
        assert not np.array_equal(params.running["backbone1_bn.mean"], before)

    def test_refresh_running_stats_converges_to_batch_stats(self):
        spec = (LayerSpec("batch_norm", "bn", 4, 4, "backbone1"),)
        params = init_params(spec, Rng(0))
        x = 3.0 * Rng(1).normal(size=(64, 4)) + 2.0
        encoder.refresh_running_stats(params, x, passes=200)
        assert np.allclose(params.running["bn.mean"], x.mean(axis=0),
                           atol=1e-6)
        assert np.allclose(params.running["bn.var"], x.var(axis=0),
                           atol=1e-5)


class TestBackward:
    def test_zero_grad_out_gives_zero_grads(self):
        params = build_branch(tiny_cfg(), Rng(0))
        x = Rng(1).normal(size=(4, 12))
        _, cache = forward(params, x, training=True)
        grads, grad_in = backward(cache, np.zeros((4, 6)))
        assert all(np.all(g == 0) for g in grads.values())
        assert np.all(grad_in == 0)

    def test_linear_weight_grad_analytic_form(self):
        spec = (LayerSpec("linear", "lin", 3, 2, "backbone1", has_bias=False),)
        params = init_params(spec, Rng(0))
        x = Rng(1).normal(size=(5, 3))
        g = Rng(2).normal(size=(5, 2))
        _, cache = forward(params, x, training=True)
        grads, _ = backward(cache, g)
        assert np.array_equal(grads["lin.weight"], matmul(x.T, g))

    def test_eval_cache_rejected(self):
        params = build_branch(tiny_cfg(), Rng(0))
        _, cache = forward(params, Rng(1).normal(size=(4, 12)), training=False)
        with pytest.raises(ConfigError):
            backward(cache, np.zeros((4, 6)))

    def test_grad_shape_mismatch(self):
        params = build_branch(tiny_cfg(), Rng(0))
        _, cache = forward(params, Rng(1).normal(size=(4, 12)), training=True)
        with pytest.raises(DimensionError):
            backward(cache, np.zeros((4, 7)))

    def test_three_layer_encoder_matches_finite_differences(self):
        # linear + BN + relu over a random 4x8 input
        specs = (
            LayerSpec("linear", "lin", 8, 6, "backbone1", has_bias=False),
            LayerSpec("batch_norm", "bn", 6, 6, "backbone1"),
            LayerSpec("relu", "act", 6, 6, "backbone1"),
        )
        params = init_params(specs, Rng(5))
        x = Rng(6).normal(size=(4, 8))
        assert encoder_fd_check(params, x, seed=7) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_on_random_small_configs(self, seed):
        rng = Rng(seed)
        dims = rng.child("dims")
        cfg = tiny_cfg(
            backbone_hidden=int(dims.integers(3, 8)),
            backbone_out=int(dims.integers(3, 8)),
            projector_hidden=int(dims.integers(3, 8)),
            projector_out=int(dims.integers(2, 6)),
            projector_hidden_bn=bool(dims.random() < 0.5),
        )
        params = build_branch(cfg, rng.child("init"),
                              with_predictor=bool(dims.random() < 0.5))
        x = rng.child("x").normal(size=(4, 12))
        assert encoder_fd_check(params, x, seed=seed) < 1e-4


class TestBuildBranch:
    def test_placement_none_has_no_predictor(self):
        params = build_branch(tiny_cfg(), Rng(0), with_predictor=False)
        assert not any(name.startswith("predictor") for name in params.tensors)

    def test_teacher_predictor_mirrors_student(self):
        student = build_branch(tiny_cfg(), Rng(0), with_predictor=True)
        teacher = make_teacher(student, include_predictor=True)
        pred_names = [n for n in student.tensors if n.startswith("predictor")]
        assert pred_names
        for name in pred_names:
            assert teacher.tensors[name].shape == student.tensors[name].shape
            assert np.array_equal(teacher.tensors[name], student.tensors[name])

    def test_teacher_without_predictor(self):
        student = build_branch(tiny_cfg(), Rng(0), with_predictor=True)
        teacher = make_teacher(student, include_predictor=False)
        assert not any(n.startswith("predictor") for n in teacher.tensors)
        assert "projector" in teacher.stage_names()

    def test_hidden_bn_flag_off_removes_projector_gains(self):
        params = build_branch(tiny_cfg(projector_hidden_bn=False), Rng(0))
        projector_gains = [
            n for n, role in params.roles.items()
            if n.startswith("projector") and role == "norm_gain"
        ]
        assert projector_gains == []
        # the hidden linear regains its bias when no BN follows
        assert "projector_lin1.bias" in params.tensors

    def test_init_is_deterministic(self):
        a = build_branch(tiny_cfg(), Rng(42))
        b = build_branch(tiny_cfg(), Rng(42))
        for name in a.tensors:
            assert np.array_equal(a.tensors[name], b.tensors[name])

    def test_stage_names_in_depth_order(self):
        params = build_branch(tiny_cfg(), Rng(0))
        assert params.stage_names() == [
            "backbone1", "backbone2", "projector", "predictor"
        ]
