import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from ringsvbrdf.latent import INIT_SPECULAR, LatentMaps, decode, decode_vjp, encode
from ringsvbrdf.losses import render_loss_and_grad
from ringsvbrdf.maps import FIELDS, R_MIN, SvbrdfMaps
from ringsvbrdf.optim import (
    SGD,
    Adam,
    EarlyStopper,
    OptimizationDiverged,
    PixelMajorField,
    latent_loss_and_grad,
    optimize_svbrdf_direct,
)
from ringsvbrdf.render import LightRig, SceneGeometry, light_field, render_lights, tonemap
from ringsvbrdf.synth import procedural_material


def random_latent(seed, res=8, scale=1.5):
    rng = np.random.default_rng(seed)
    return LatentMaps(
        rng.normal(0, 0.4, (res, res, 3)),
        rng.normal(0, scale, (res, res, 3)),
        rng.normal(0, scale, (res, res)),
        rng.normal(-1.0, scale, (res, res, 3)),
    )


class TestDecode:
    def test_zero_latent(self):
        m = decode(LatentMaps.zeros(4))
        np.testing.assert_allclose(m.normals[0, 0], [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(m.diffuse, 0.5)
        np.testing.assert_allclose(m.roughness, R_MIN + 0.5 * (1 - R_MIN))

    def test_initial_specular(self):
        m = decode(LatentMaps.initial(4))
        np.testing.assert_allclose(m.specular, INIT_SPECULAR, rtol=1e-12)
        np.testing.assert_allclose(m.diffuse, 0.5)

    def test_always_valid(self):
        lat = random_latent(0, scale=30.0)
        lat.normals[..., 2] = -50.0
        m = decode(lat)
        assert m.is_valid()
        assert np.all(m.normals[..., 2] > 0)

    def test_non_finite(self):
        lat = LatentMaps.zeros(4)
        lat.roughness[1, 1] = np.nan
        with pytest.raises(ValueError, match="roughness"):
            decode(lat)

    @pytest.mark.parametrize("seed", range(3))
    def test_encode_round_trip(self, seed):
        m = procedural_material(8, seed)
        back = decode(encode(m))
        for f in FIELDS:
            np.testing.assert_allclose(getattr(back, f), getattr(m, f), atol=1e-9)

    def test_vjp_fd(self):
        lat = random_latent(2)
        rng = np.random.default_rng(3)
        adj = SvbrdfMaps(*(rng.normal(size=getattr(lat, f).shape) for f in FIELDS))

        def f(x):
            m = decode(x)
            return sum(float(np.sum(getattr(m, k) * getattr(adj, k))) for k in FIELDS)

        g = decode_vjp(lat, adj)
        h = 1e-6
        for _ in range(30):
            k = FIELDS[int(rng.integers(4))]
            idx = tuple(int(rng.integers(s)) for s in getattr(lat, k).shape)
            p, m = lat.copy(), lat.copy()
            getattr(p, k)[idx] += h
            getattr(m, k)[idx] -= h
            fd = (f(p) - f(m)) / (2 * h)
            assert getattr(g, k)[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


@pytest.fixture(scope="module")
def setup():
    gt = procedural_material(8, 11, "glossy")
    rig, geom = LightRig.ring(), SceneGeometry(430, 8)
    lights = [0, 4, 6, 10]
    lf = light_field(rig, geom, lights)
    target = tonemap(np.clip(render_lights(gt, rig, geom, lights), 0, 1))
    return lf, target


@pytest.fixture(scope="module")
def scene():
    gt = procedural_material(16, 0, "diffuse")
    rig, geom = LightRig.ring(), SceneGeometry(450, 16)
    lights = [0, 2, 4, 6, 8, 10]
    obs = np.clip(render_lights(gt, rig, geom, lights), 0, 1)
    return gt, rig, geom, lights, obs


class TestFusedKernel:
    @pytest.mark.parametrize("clip", [True, False])
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_composition(self, setup, seed, clip):
        lf, target = setup
        lat = random_latent(seed)
        loss, g = latent_loss_and_grad(lat, lf, target, clip=clip)
        ref_loss, g_maps = render_loss_and_grad(decode(lat), lf, target, clip=clip)
        ref = decode_vjp(lat, g_maps)
        assert loss == pytest.approx(ref_loss, rel=1e-11)
        for f in FIELDS:
            np.testing.assert_allclose(getattr(g, f), getattr(ref, f), rtol=1e-8, atol=1e-14)

    def test_prebuilt_field(self, setup):
        lf, target = setup
        lat = random_latent(5)
        a, _ = latent_loss_and_grad(lat, lf, target)
        b, _ = latent_loss_and_grad(lat, PixelMajorField.build(lf, target))
        assert a == b

    def test_fd(self, setup):
        lf, target = setup
        lat = random_latent(7)
        _, g = latent_loss_and_grad(lat, lf, target, clip=False)
        rng = np.random.default_rng(8)
        h = 1e-6
        checked = 0
        while checked < 25:
            k = FIELDS[int(rng.integers(4))]
            idx = tuple(int(rng.integers(s)) for s in getattr(lat, k).shape)
            p, m = lat.copy(), lat.copy()
            getattr(p, k)[idx] += h
            getattr(m, k)[idx] -= h
            lp = latent_loss_and_grad(p, lf, target, clip=False)[0]
            lm = latent_loss_and_grad(m, lf, target, clip=False)[0]
            l0 = latent_loss_and_grad(lat, lf, target, clip=False)[0]
            # skip kinks of |.|
            if abs((lp - l0) - (l0 - lm)) > 1e-3 * abs(lp - lm) + 1e-15:
                continue
            assert getattr(g, k)[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-10)
            checked += 1

    def test_target_shape_mismatch(self, setup):
        lf, target = setup
        with pytest.raises(ValueError):
            PixelMajorField.build(lf, target[:2])


def adam_oracle(grads_seq, x0, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = list(x0), [0.0] * len(x0), [0.0] * len(x0)
    for t, g in enumerate(grads_seq, start=1):
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            x[i] -= lr * mh / (math.sqrt(vh) + eps)
    return x


class TestOptimizers:
    def test_adam_matches_oracle(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=(100, 5))
        x0 = rng.normal(size=5)
        params = {"w": x0.copy()}
        opt = Adam(0.01)
        for g in grads:
            opt.step(params, {"w": g.copy()})
        np.testing.assert_allclose(params["w"], adam_oracle(grads.tolist(), x0.tolist()), rtol=1e-12, atol=1e-14)

    def test_adam_first_step_is_lr_sign(self):
        params = {"w": np.zeros(3)}
        Adam(0.1).step(params, {"w": np.array([5.0, -0.01, 2.0])})
        np.testing.assert_allclose(params["w"], [-0.1, 0.1, -0.1], rtol=1e-6)

    def test_sgd(self):
        params = {"a": np.array([1.0, 2.0])}
        SGD(0.5).step(params, {"a": np.array([2.0, -2.0])})
        np.testing.assert_array_equal(params["a"], [0.0, 3.0])

    def test_sgd_momentum(self):
        params = {"a": np.zeros(1)}
        opt = SGD(1.0, momentum=0.5)
        for _ in range(3):
            opt.step(params, {"a": np.ones(1)})
        # velocities 1, 1.5, 1.75
        np.testing.assert_allclose(params["a"], [-4.25])

    def test_non_finite_grad(self):
        with pytest.raises(OptimizationDiverged):
            SGD(0.1).step({"a": np.zeros(2)}, {"a": np.array([np.inf, 0.0])})

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Adam().step({"a": np.zeros(2)}, {"a": np.zeros(3)})

    def test_quadratic_converges(self):
        params = {"x": np.array([3.0, -2.0])}
        opt = Adam(0.05)
        for _ in range(2000):
            opt.step(params, {"x": 2 * params["x"]})
        assert np.abs(params["x"]).max() < 1e-3


class TestEarlyStopper:
    def test_stops_after_patience(self):
        s = EarlyStopper(patience=3)
        assert not s.update(1.0)
        assert [s.update(1.0) for _ in range(3)] == [False, False, True]

    def test_small_improvement_does_not_count(self):
        s = EarlyStopper(patience=2, min_delta=1e-6)
        s.update(1.0)
        assert not s.update(1.0 - 1e-7)
        assert s.update(1.0 - 2e-7)
        assert s.best == 1.0 - 2e-7

    def test_improvement_resets(self):
        s = EarlyStopper(patience=2)
        s.update(1.0)
        s.update(1.0)
        assert not s.update(0.5)
        assert s.since_best == 0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=1, max_size=50))
    def test_best_is_running_min(self, losses):
        s = EarlyStopper(patience=1000)
        for x in losses:
            s.update(x)
        assert s.best == min(losses)


class TestDirect:
    def test_loss_decreases(self, scene):
        gt, rig, geom, lights, obs = scene
        res = optimize_svbrdf_direct(obs, rig, geom, lights, iters=300)
        assert res.trace[-1] < 0.2 * res.trace[0]
        assert np.all(np.diff(res.best_trace) <= 0)
        assert res.maps.is_valid()

    def test_diffuse_recovered(self, scene):
        gt, rig, geom, lights, obs = scene
        res = optimize_svbrdf_direct(obs, rig, geom, lights, iters=1500)
        assert np.mean(np.abs(res.maps.diffuse - gt.diffuse)) < 0.05

    def test_perfect_init_stays(self, scene):
        gt, rig, geom, lights, obs = scene
        res = optimize_svbrdf_direct(obs, rig, geom, lights, iters=5, init=encode(gt))
        assert res.trace[0] < 1e-6

    def test_early_stop(self, scene):
        gt, rig, geom, lights, obs = scene
        res = optimize_svbrdf_direct(obs, rig, geom, lights, iters=500, patience=3, init=encode(gt), lr=0.0)
        assert res.stopped_early
        assert len(res.trace) == 4

    def test_deterministic(self, scene):
        _, rig, geom, lights, obs = scene
        a = optimize_svbrdf_direct(obs, rig, geom, lights, iters=30)
        b = optimize_svbrdf_direct(obs, rig, geom, lights, iters=30)
        assert a.trace == b.trace

    def test_wrong_image_count(self, scene):
        _, rig, geom, lights, obs = scene
        with pytest.raises(ValueError):
            optimize_svbrdf_direct(obs[:3], rig, geom, lights, iters=2)

    def test_no_lights(self, scene):
        _, rig, geom, _, obs = scene
        with pytest.raises(ValueError):
            optimize_svbrdf_direct(obs[:0], rig, geom, [], iters=2)

    def test_huge_lr_backs_off(self, scene):
        _, rig, geom, lights, obs = scene
        res = optimize_svbrdf_direct(obs, rig, geom, lights, iters=50, lr=1e6)
        assert all(math.isfinite(x) for x in res.trace)
        assert res.maps.is_valid()
        assert res.best_loss <= res.trace[0]

    def test_specular_init_constant(self):
        assert LatentMaps.initial(2).specular[0, 0, 0] == pytest.approx(logit(0.04))
