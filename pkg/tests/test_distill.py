import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gensis.autodiff import Tensor, finite_diff_check
from gensis.distill import (
    DistillState,
    ScheduleConfig,
    ViewBatch,
    cosine_schedules,
    cross_entropy,
    dino_loss,
    entropy,
    sharpen_student,
    sharpen_teacher,
    teacher_logits,
    update_center,
    update_teacher_ema,
)

# wide enough to exercise sharpening, narrow enough that exp never underflows to 0
logits = arrays(np.float64, (3, 5), elements=st.floats(-5, 5, allow_nan=False))


def softmax64(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TestSharpen:
    def test_equal_logits_uniform(self):
        for tau in (0.01, 0.1, 3.0):
            np.testing.assert_allclose(sharpen_student(np.full(7, 2.0), tau).data, np.full(7, 1 / 7))

    def test_student_numeric(self):
        p = sharpen_student(np.array([1.0, 0.0]), 0.1).data
        e10 = math.exp(10.0)
        np.testing.assert_allclose(p, [e10 / (e10 + 1), 1 / (e10 + 1)], rtol=1e-14)

    def test_teacher_center_equal_to_logits_is_uniform(self):
        L = np.array([[3.0, -1.0, 0.5]])
        np.testing.assert_allclose(sharpen_teacher(L, L[0], 0.04), np.full((1, 3), 1 / 3))

    def test_teacher_zero_center_matches_student(self):
        L = np.random.default_rng(0).standard_normal((4, 6))
        np.testing.assert_allclose(sharpen_teacher(L, np.zeros(6), 0.04), sharpen_student(L, 0.04).data, atol=1e-15)

    def test_teacher_numeric(self):
        L = np.array([0.3, -0.2, 0.05])
        c = np.array([0.1, 0.0, -0.1])
        np.testing.assert_allclose(sharpen_teacher(L, c, 0.04), softmax64((L - c) / 0.04), rtol=1e-12)

    def test_teacher_is_detached(self):
        L = Tensor(np.ones((2, 3)), requires_grad=True)
        assert isinstance(sharpen_teacher(L, np.zeros(3), 0.04), np.ndarray)

    @settings(max_examples=100)
    @given(logits, st.floats(-50, 50), st.floats(0.02, 2.0))
    def test_positive_normalized_shift_invariant(self, L, shift, tau):
        P = sharpen_student(L, tau).data
        assert np.all(P > 0)
        np.testing.assert_allclose(P.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(sharpen_student(L + shift, tau).data, P, atol=1e-9)
        Pt = sharpen_teacher(L, np.zeros(5), tau)
        np.testing.assert_allclose(Pt.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(sharpen_teacher(L + shift, np.zeros(5), tau), Pt, atol=1e-9)


class TestCrossEntropy:
    def test_uniform_gives_log_k(self):
        u = np.full(8, 1 / 8)
        assert cross_entropy(u, u).item() == pytest.approx(math.log(8), abs=1e-12)

    def test_one_hot(self):
        p_s = np.array([0.2, 0.5, 0.3])
        assert cross_entropy(np.array([0.0, 1.0, 0.0]), p_s).item() == pytest.approx(-math.log(0.5))

    def test_random_pair_matches_oracle(self):
        rng = np.random.default_rng(1)
        P_t = softmax64(rng.standard_normal((6, 9)))
        P_s = softmax64(rng.standard_normal((6, 9)))
        expected = math.fsum(-(P_t * np.log(P_s)).ravel()) / 6
        assert cross_entropy(P_t, P_s).item() == pytest.approx(expected, rel=1e-13)

    def test_zero_probability_is_clamped(self):
        val = cross_entropy(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item()
        assert val == pytest.approx(-math.log(1e-12))

    def test_entropy(self):
        assert entropy(np.full((2, 4), 0.25)) == pytest.approx(math.log(4))
        assert entropy(np.array([[1.0, 0.0]])) == 0.0


class TestMovingAverages:
    def test_center_fixed_point(self):
        c = np.array([0.5, -1.0, 2.0])
        assert np.array_equal(update_center(c, np.tile(c, (4, 1)), 0.9), c)

    def test_center_from_zero(self):
        b = np.array([1.0, 2.0, -3.0])
        np.testing.assert_allclose(update_center(np.zeros(3), b[None], 0.9), 0.1 * b, rtol=1e-15)

    def test_center_recurrence_closed_form(self):
        rng = np.random.default_rng(2)
        c0, b = rng.standard_normal((2, 5))
        c = c0
        for n in range(1, 31):
            c = update_center(c, b[None], 0.9)
            np.testing.assert_allclose(c, 0.9**n * c0 + (1 - 0.9**n) * b, atol=1e-14)

    def test_center_averages_batch(self):
        L = np.array([[1.0, 0.0], [3.0, 2.0]])
        np.testing.assert_allclose(update_center(np.zeros(2), L, 0.5), [1.0, 0.5])

    def test_ema_limits(self, tiny_nets):
        student, teacher = tiny_nets()
        before = {k: v.copy() for k, v in teacher.state_dict().items()}
        update_teacher_ema(teacher, student, 1.0)
        for k, v in teacher.state_dict().items():
            assert np.array_equal(v, before[k])
        update_teacher_ema(teacher, student, 0.0)
        for k, v in teacher.state_dict().items():
            assert np.array_equal(v, student.state_dict()[k])

    def test_ema_half(self, tiny_nets):
        student, teacher = tiny_nets()
        for p in teacher.parameters().values():
            p.data[...] = 2.0
        for p in student.parameters().values():
            p.data[...] = 4.0
        update_teacher_ema(teacher, student, 0.5)
        assert all(np.all(v == 3.0) for v in teacher.state_dict().values())

    def test_ema_exact_formula(self, tiny_nets):
        student, teacher = tiny_nets(seed=3)
        phi = {k: v.copy() for k, v in teacher.state_dict().items()}
        update_teacher_ema(teacher, student, 0.996)
        for k, v in teacher.state_dict().items():
            assert np.array_equal(v, 0.996 * phi[k] + (1 - 0.996) * student.state_dict()[k])

    def test_ema_rejects_mismatch(self, tiny_nets):
        student, _ = tiny_nets()
        other, _ = tiny_nets(out_dim=3)
        with pytest.raises(ValueError, match="shape"):
            update_teacher_ema(other, student, 0.5)

    def test_state_validation(self):
        with pytest.raises(ValueError):
            DistillState.zeros(4, tau_t=0.0)
        with pytest.raises(ValueError):
            DistillState.zeros(4, center_momentum=1.0)
        with pytest.raises(ValueError):
            DistillState(np.array([np.nan, 0.0]))


def views(rng, n_views, B=3, dim=32):
    return [rng.uniform(0, 1, (B, dim)) for _ in range(n_views)]


def brute_force_loss(batch, student, teacher, state, gen_weight=1.0):
    """Loop over every (teacher view, student view) pair in float64."""
    t_views = batch.global_views + batch.synthetic_views
    s_views = t_views + batch.local_views
    n_global = len(batch.global_views)
    total, weight = 0.0, 0.0
    for i, tv in enumerate(t_views):
        P_t = softmax64((teacher_logits(teacher, tv) - state.center) / state.tau_t)
        for j, sv in enumerate(s_views):
            if i == j:
                continue
            w = gen_weight if (i >= n_global or n_global <= j < len(t_views)) else 1.0
            _, L_s = student(sv)
            P_s = softmax64(L_s.data / state.tau_s)
            total += w * np.mean(-(P_t * np.log(P_s)).sum(axis=1))
            weight += w
    return total / weight


class TestDinoLoss:
    def test_identical_views_equal_entropy(self, tiny_nets):
        student, teacher = tiny_nets(same=True)
        img = np.random.default_rng(4).uniform(0, 1, (1, 32))
        state = DistillState.zeros(4, tau_s=0.1, tau_t=0.1)
        loss = dino_loss(ViewBatch([img, img.copy()]), student, teacher, state).item()
        _, L = teacher(img)
        assert loss == pytest.approx(entropy(softmax64(L.data / 0.1)), rel=1e-12)

    @pytest.mark.parametrize("n_local,n_syn,gen_weight", [(0, 0, 1.0), (2, 0, 1.0), (2, 1, 1.0), (1, 2, 0.5)])
    def test_matches_pair_enumeration(self, tiny_nets, n_local, n_syn, gen_weight):
        student, teacher = tiny_nets(seed=5, out_dim=3)
        rng = np.random.default_rng(6)
        batch = ViewBatch(views(rng, 2), views(rng, n_local, dim=8), views(rng, n_syn))
        state = DistillState(rng.standard_normal(3) * 0.1)
        expected = brute_force_loss(batch, student, teacher, state, gen_weight)
        got = dino_loss(batch, student, teacher, state, gen_weight=gen_weight, update=False).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_gradient_64bit(self, tiny_nets):
        student, teacher = tiny_nets(seed=7)
        rng = np.random.default_rng(8)
        batch = ViewBatch(views(rng, 2), views(rng, 2, dim=8), views(rng, 1))
        state = DistillState(rng.standard_normal(4) * 0.1)
        params = list(student.parameters().values())
        err = finite_diff_check(lambda: dino_loss(batch, student, teacher, state, update=False), params, eps=1e-6)
        assert err < 1e-4

    def test_teacher_receives_no_gradient(self, tiny_nets):
        student, teacher = tiny_nets(seed=9)
        for p in teacher.parameters().values():
            p.requires_grad = True
        rng = np.random.default_rng(10)
        dino_loss(ViewBatch(views(rng, 2)), student, teacher, DistillState.zeros(4)).backward()
        assert all(p.grad is None for p in teacher.parameters().values())
        assert all(p.grad is not None for p in student.parameters().values())

    def test_view_order_invariance(self, tiny_nets):
        student, teacher = tiny_nets(seed=11)
        rng = np.random.default_rng(12)
        g, loc = views(rng, 2), views(rng, 3, dim=8)
        state = DistillState.zeros(4)
        a = dino_loss(ViewBatch(g, loc), student, teacher, state, update=False).item()
        b = dino_loss(ViewBatch(g[::-1], loc[::-1]), student, teacher, state, update=False).item()
        assert a == pytest.approx(b, rel=1e-13)

    def test_center_updated_once_per_call(self, tiny_nets):
        student, teacher = tiny_nets(seed=13)
        rng = np.random.default_rng(14)
        batch = ViewBatch(views(rng, 2), views(rng, 2, dim=8))
        state = DistillState.zeros(4)
        dino_loss(batch, student, teacher, state)
        L = teacher_logits(teacher, np.concatenate(batch.global_views))
        np.testing.assert_allclose(state.center, 0.1 * L.mean(axis=0), atol=1e-15)

    def test_frozen_teacher_outputs_constant(self, tiny_nets):
        student, teacher = tiny_nets(seed=15)
        img = np.random.default_rng(16).uniform(0, 1, (2, 32))
        ref = teacher_logits(teacher, img)
        for _ in range(5):
            for p in student.parameters().values():
                p.data = p.data + 0.01
            update_teacher_ema(teacher, student, 1.0)
        assert np.array_equal(teacher_logits(teacher, img), ref)

    def test_needs_two_teacher_views(self, tiny_nets):
        student, teacher = tiny_nets()
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="two teacher views"):
            dino_loss(ViewBatch(views(rng, 1)), student, teacher, DistillState.zeros(4))


class TestSchedules:
    cfg = ScheduleConfig(base_lr=5e-4, batch_size=128, warmup_steps=10, min_lr=1e-6)

    def test_warmup_start(self):
        assert cosine_schedules(0, 100, self.cfg)[0] == 0.0

    def test_peak_uses_linear_scaling(self):
        lr, _, _ = cosine_schedules(10, 100, self.cfg)
        assert lr == pytest.approx(5e-4 * 128 / 256)

    def test_end_values(self):
        lr, wd, lam = cosine_schedules(100, 100, self.cfg)
        assert lr == pytest.approx(1e-6)
        assert wd == pytest.approx(0.4)
        assert lam == pytest.approx(1.0)

    def test_start_values(self):
        _, wd, lam = cosine_schedules(0, 100, self.cfg)
        assert wd == pytest.approx(0.04)
        assert lam == pytest.approx(0.996)

    def test_monotone(self):
        rows = np.array([cosine_schedules(s, 100, self.cfg) for s in range(101)])
        assert np.all(np.diff(rows[:11, 0]) > 0)
        assert np.all(np.diff(rows[10:, 0]) <= 0)
        assert np.all(np.diff(rows[:, 1]) >= 0)
        assert np.all(np.diff(rows[:, 2]) >= 0)
