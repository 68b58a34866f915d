import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsplat import diffcore as dc
from anchorsplat import losses
from anchorsplat.config import GroupLR
from anchorsplat.optim import Adam, group_lr
from conftest import numeric_grad


def ssim_oracle(x, y):
    """Direct windowed statistics per pixel with explicit zero padding."""
    h, w, c = x.shape
    g = losses.gaussian_window()
    win = np.outer(g, g)
    r = len(g) // 2
    c1, c2 = (0.01) ** 2, (0.03) ** 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)))
    yp = np.pad(y, ((r, r), (r, r), (0, 0)))
    total = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(c):
                px = xp[i:i + 2 * r + 1, j:j + 2 * r + 1, k]
                py = yp[i:i + 2 * r + 1, j:j + 2 * r + 1, k]
                mx, my = (win * px).sum(), (win * py).sum()
                sxx = (win * px * px).sum() - mx * mx
                syy = (win * py * py).sum() - my * my
                sxy = (win * px * py).sum() - mx * my
                total += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return total / x.size


class TestImageLoss:
    def test_identical(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        p = dc.constant(img)
        assert losses.l1_loss(p, img).item() == 0
        assert abs(losses.ssim_loss(p, img).item()) < 1e-12

    def test_l1_extreme(self):
        assert losses.l1_loss(dc.constant(np.ones((4, 4, 3))), np.zeros((4, 4, 3))).item() == 1.0

    def test_ssim_oracle_shift(self):
        x = np.random.default_rng(1).random((12, 10, 2))
        assert abs(losses.ssim(x, x + 0.1) - ssim_oracle(x, x + 0.1)) < 1e-8

    def test_ssim_oracle_random(self):
        rng = np.random.default_rng(2)
        x, y = rng.random((9, 13, 3)), rng.random((9, 13, 3))
        assert abs(losses.ssim(x, y) - ssim_oracle(x, y)) < 1e-8

    @pytest.mark.parametrize("fn", [losses.ssim_loss, losses.l1_loss])
    def test_gradients(self, fn):
        rng = np.random.default_rng(3)
        x0, y = rng.random((7, 9, 3)), rng.random((7, 9, 3))
        p = dc.Param(x0, "mlp", "x")
        dc.backward(fn(p, y))
        num = numeric_grad(lambda x: fn(dc.constant(x), y).item(), x0)
        np.testing.assert_allclose(p.grad, num, rtol=1e-5, atol=1e-9)

    def test_scale_volume(self):
        rng = np.random.default_rng(4)
        s0 = rng.uniform(0.1, 1, (6, 3))
        mask = np.array([1, 0, 1, 1, 0, 1], bool)
        p = dc.Param(s0, "mlp", "s")
        val = losses.scale_volume_loss(p, mask)
        assert np.isclose(val.item(), s0[mask].prod(axis=1).mean())
        dc.backward(val)
        num = numeric_grad(lambda s: losses.scale_volume_loss(dc.constant(s), mask).item(), s0)
        np.testing.assert_allclose(p.grad, num, rtol=1e-6, atol=1e-10)
        assert losses.scale_volume_loss(p, np.zeros(6, bool)).item() == 0

    def test_shape_mismatch(self):
        with pytest.raises(dc.DimensionError):
            losses.l1_loss(dc.constant(np.zeros((2, 2, 3))), np.zeros((2, 3, 3)))


class TestFeatureLoss:
    def test_identical(self):
        f = np.random.default_rng(0).normal(size=(10, 4))
        assert abs(losses.feature_loss(dc.constant(f), f).item()) < 1e-12

    def test_orthogonal_units(self):
        l2, cosd = losses.feature_loss_terms(np.array([[1.0, 0]]), np.array([[0, 1.0]]))
        assert l2 == 2.0 and cosd == 1.0

    def test_flat_loop_oracle(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(30, 6)), rng.normal(size=(30, 6))
        tot = 0.0
        for u, v in zip(a, b):
            d2 = sum((x - y) ** 2 for x, y in zip(u, v))
            cos = sum(x * y for x, y in zip(u, v)) / max(np.sqrt(sum(x * x for x in u)) * np.sqrt(sum(y * y for y in v)), 1e-8)
            tot += d2 + (1 - cos)
        assert abs(losses.feature_loss(dc.constant(a), b).item() - tot / 30) < 1e-10

    def test_gradient(self):
        rng = np.random.default_rng(6)
        a0, b = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
        p = dc.Param(a0, "mlp", "f")
        dc.backward(losses.feature_loss(p, b))
        num = numeric_grad(lambda a: losses.feature_loss(dc.constant(a), b).item(), a0)
        np.testing.assert_allclose(p.grad, num, rtol=1e-6, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert losses.feature_loss(dc.constant(a), b).item() >= 0
        img = rng.random((11, 11, 3))
        assert losses.ssim_loss(dc.constant(img), rng.random((11, 11, 3))).item() >= 0
        assert losses.l1_loss(dc.constant(img), rng.random((11, 11, 3))).item() >= 0


class TestMetrics:
    def test_psnr_closed_form(self):
        gt = np.zeros((10, 10, 3))
        assert abs(losses.psnr(gt + 0.1, gt) - 20.0) < 1e-9
        assert losses.psnr(gt, gt) == 99.0

    def test_identical_features(self):
        f = np.random.default_rng(0).normal(size=(4, 4, 8))
        cosd, l2 = losses.feature_metrics(f, f)
        assert abs(cosd) < 1e-12 and l2 == 0

    def test_flat_loop_oracle(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
        cs, ls = [], []
        for u, v in zip(a.reshape(-1, 5), b.reshape(-1, 5)):
            cs.append(1 - u @ v / max(np.linalg.norm(u) * np.linalg.norm(v), 1e-8))
            ls.append(np.sqrt(((u - v) ** 2).sum()))
        cosd, l2 = losses.feature_metrics(a, b)
        assert abs(cosd - np.mean(cs)) < 1e-10 and abs(l2 - np.mean(ls)) < 1e-10


class TestAdam:
    def test_zero_grad_no_move(self):
        p = dc.Param(np.array([1.0, -2.0]), "mlp", "p")
        opt = Adam([p], {"mlp": GroupLR(0.1)})
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        p.grad[:] = 1.0
        opt.step()
        m1, v1 = opt.m[id(p)].copy(), opt.v[id(p)].copy()
        p.grad[:] = 0.0
        opt.step()
        np.testing.assert_allclose(opt.m[id(p)], 0.9 * m1)
        np.testing.assert_allclose(opt.v[id(p)], 0.999 * v1)

    def test_scalar_simulation(self):
        p = dc.Param(np.array([0.0]), "mlp", "p")
        opt = Adam([p], {"mlp": GroupLR(0.01)}, eps=1e-8)
        m = v = 0.0
        x = 0.0
        for t in range(1, 301):
            p.grad[:] = 3.0
            opt.step()
            m = 0.9 * m + 0.1 * 3.0
            v = 0.999 * v + 0.001 * 9.0
            step = 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            x -= step
        assert abs(p.data[0] - x) < 1e-12
        assert abs(step - 0.01) < 1e-8

    def test_group_routing(self):
        a = dc.Param(np.array([1.0]), "mlp", "a")
        b = dc.Param(np.array([1.0]), "adapt_layer", "b")
        opt = Adam([a, b], {"mlp": GroupLR(1e-3), "adapt_layer": GroupLR(3e-3)})
        for _ in range(10):
            a.grad[:] = b.grad[:] = 0.5
            opt.step()
        assert np.isclose((1 - b.data[0]) / (1 - a.data[0]), 3.0, rtol=1e-9)

    def test_lr_decay(self):
        spec = GroupLR(1e-2, 1e-4, 100)
        assert group_lr(spec, 0) == pytest.approx(1e-2)
        assert group_lr(spec, 50) == pytest.approx(1e-3)
        assert group_lr(spec, 500) == pytest.approx(1e-4)

    def test_unique_names(self):
        with pytest.raises(ValueError):
            Adam([dc.Param(np.zeros(1), "mlp", "x"), dc.Param(np.zeros(1), "mlp", "x")],
                 {"mlp": GroupLR(1e-3)})
