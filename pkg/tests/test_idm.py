import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharedbit import autodiff as ad
from sharedbit.autodiff import Tape, Tensor
from sharedbit.idm import IDMHead, idm_loss, idm_site_selection, standardize
from sharedbit.supernet import BitSpace, Policy

from gradcheck import assert_close_rel, numeric_grad


def head64(c, **kw):
    h = IDMHead(c, **kw)
    for t in h.parameters():
        t.data = t.data.astype(np.float64)
    return h


def loss_value(o_s, o_h, head):
    return idm_loss(Tensor(o_s), Tensor(o_h), head).item()


class TestStandardize:
    def test_hand_example(self):
        out = standardize(Tensor(np.array([[1.0], [3.0]])), eps=1e-12).data
        np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-9)

    def test_constant_channel_is_zero(self):
        out = standardize(Tensor(np.full((4, 2, 3, 3), 7.0))).data
        np.testing.assert_array_equal(out, 0.0)

    def test_moments(self):
        rng = np.random.default_rng(0)
        o = rng.normal(3.0, 2.0, size=(8, 5, 4, 4))
        z = standardize(Tensor(o)).data
        np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(z.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


class TestIDMLoss:
    def test_identical_branches(self):
        o = np.random.default_rng(1).normal(size=(4, 3, 2, 2))
        assert loss_value(o, o, head64(3)) == 0.0

    def test_dead_zone(self):
        h = head64(2)
        h.shift_s.data = np.full(2, -100.0)
        h.shift_h.data = np.full(2, -100.0)
        rng = np.random.default_rng(2)
        assert loss_value(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), h) == 0.0

    def test_scalar_hand_case(self):
        # columns standardize to +1 / -1 in the one sample that matters
        o_s = np.array([[1.0], [-1.0]])
        o_h = np.array([[-1.0], [1.0]])
        h = head64(1, eps=1e-12)
        # elementwise: |max(0,1) - max(0,-1)| = 1 and |max(0,-1) - max(0,1)| = 1
        assert loss_value(o_s, o_h, h) == pytest.approx(1.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            idm_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))), head64(3))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_non_negative_and_zero_iff_equal(self, seed):
        rng = np.random.default_rng(seed)
        o_s, o_h = rng.normal(size=(2, 6, 3))
        h = head64(3)
        v = loss_value(o_s, o_h, h)
        assert v >= 0.0
        a = np.maximum(standardize(Tensor(o_s)).data, 0)
        b = np.maximum(standardize(Tensor(o_h)).data, 0)
        assert (v == 0.0) == bool(np.all(a == b))

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        o_s, o_h = rng.normal(size=(2, 4, 5, 3, 3))
        h = head64(5)
        for t in h.parameters():
            t.data = rng.normal(size=5)
        perm = rng.permutation(5)
        hp = head64(5)
        for src, dst in zip(h.parameters(), hp.parameters()):
            dst.data = src.data[perm]
        a = loss_value(o_s, o_h, h)
        b = loss_value(o_s[:, perm], o_h[:, perm], hp)
        assert a == pytest.approx(b, rel=1e-12)


class TestIDMGradients:
    def _smooth_point(self, rng):
        """Inputs whose adapted features stay clear of the max kink and of equality."""
        while True:
            o_s, o_h = rng.normal(size=(2, 6, 3))
            h = head64(3)
            for t in h.parameters():
                t.data = rng.normal(size=3) * 0.5 + (1.0 if "gain" in t.name else 0.0)
            zs = standardize(Tensor(o_s)).data * h.gain_s.data + h.shift_s.data
            zh = standardize(Tensor(o_h)).data * h.gain_h.data + h.shift_h.data
            rs, rh = np.maximum(zs, 0), np.maximum(zh, 0)
            if np.min(np.abs(zs)) > 1e-2 and np.min(np.abs(zh)) > 1e-2 and np.min(np.abs(rs - rh) + (rs + rh == 0)) > 1e-2:
                return o_s, o_h, h

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            o_s, o_h, h = self._smooth_point(rng)
            ts = Tensor(o_s, requires_grad=True)
            with Tape() as tape:
                tape.backward(idm_loss(ts, Tensor(o_h), h))
            num = numeric_grad(lambda a: loss_value(a, o_h, h), [o_s], 0, h=1e-6)
            assert_close_rel(ts.grad, num, rtol=1e-3, atol=1e-8)
            for p in h.parameters():
                def f(v, p=p):
                    old = p.data
                    p.data = v
                    try:
                        return loss_value(o_s, o_h, h)
                    finally:
                        p.data = old

                num_p = numeric_grad(f, [p.data.copy()], 0, h=1e-6)
                assert_close_rel(p.grad, num_p, rtol=1e-3, atol=1e-8)

    def test_reference_branch_is_detached(self):
        rng = np.random.default_rng(5)
        o_s, o_h, h = self._smooth_point(rng)
        th = Tensor(o_h, requires_grad=True)
        ts = Tensor(o_s, requires_grad=True)
        with Tape() as tape:
            tape.backward(idm_loss(ts, th, h))
        assert th.grad is None or np.all(th.grad == 0)
        assert np.any(ts.grad != 0)
        # the reference still moves the value
        assert loss_value(o_s, o_h + rng.normal(size=o_h.shape), h) != loss_value(o_s, o_h, h)


class TestSiteSelection:
    space = BitSpace.uniform(3, [2, 3, 4, 5, 6], [2, 3, 4, 5, 6])
    ref = [object()]

    def pol(self, bw):
        return Policy(((8, 8), (bw, 4), (8, 8)))

    def test_smallest_active(self):
        assert idm_site_selection(self.pol(2), 1, self.space, (), self.ref)

    def test_not_smallest(self):
        assert not idm_site_selection(self.pol(4), 1, self.space, (), self.ref)

    def test_smallest_unfrozen(self):
        assert idm_site_selection(self.pol(3), 1, self.space, {2}, self.ref)

    def test_fixed_layer_never(self):
        assert not idm_site_selection(self.pol(2), 0, self.space, (), self.ref)

    def test_missing_reference(self):
        with pytest.raises(ValueError):
            idm_site_selection(self.pol(2), 1, self.space, ())
