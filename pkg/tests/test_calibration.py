import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ringsvbrdf.calibration import (
    CalibrationError,
    GrayCardSpec,
    RadiometricCurve,
    apply_radiometric,
    calibrate_light_intensity,
    fit_radiometric,
    fit_scale_l1,
    golden_section,
    gray_card_maps,
)
from ringsvbrdf.render import LightRig, SceneGeometry, render_lights

GEOM = SceneGeometry(450, 16)


def graycard_images(intensity, geom=GEOM):
    rig = LightRig.ring(intensity)
    return render_lights(gray_card_maps(geom.resolution), rig, geom, range(12), specular=False)


def weighted_median_ratio(unit, obs):
    """argmin_c sum |c u - o| = weighted median of o/u with weights u."""
    u, o = unit.ravel(), obs.ravel()
    keep = u > 0
    r, w = o[keep] / u[keep], u[keep]
    order = np.argsort(r)
    r, w = r[order], w[order]
    cw = np.cumsum(w)
    return r[np.searchsorted(cw, 0.5 * cw[-1])]


class TestRadiometricFit:
    def test_planted_quadratic(self):
        u = np.linspace(0, 1, 24)
        raw = np.stack([u, u, u], axis=1)
        ref = 0.2 * raw**2 + 0.7 * raw + 0.05
        curve = fit_radiometric(raw, ref)
        np.testing.assert_allclose(curve.coeffs, np.tile([0.2, 0.7, 0.05], (3, 1)), atol=1e-9)

    def test_identity(self):
        raw = np.random.default_rng(0).random((10, 3))
        curve = fit_radiometric(raw, raw)
        np.testing.assert_allclose(curve.coeffs, np.tile([0.0, 1.0, 0.0], (3, 1)), atol=1e-9)

    def test_normal_equations_oracle(self):
        rng = np.random.default_rng(1)
        raw = rng.random((30, 3))
        ref = 0.3 * raw**2 + 0.6 * raw + 0.02 + rng.normal(0, 0.01, raw.shape)
        curve = fit_radiometric(raw, ref)
        for ch in range(3):
            A = np.stack([raw[:, ch] ** 2, raw[:, ch], np.ones(30)], axis=1)
            sol = np.linalg.solve(A.T @ A, A.T @ ref[:, ch])
            np.testing.assert_allclose(curve.coeffs[ch], sol, atol=1e-9)
            rms = np.sqrt(np.mean((A @ sol - ref[:, ch]) ** 2))
            assert curve.residual_rms[ch] == pytest.approx(rms, abs=1e-9)

    def test_too_few_distinct(self):
        raw = np.array([[0.1] * 3, [0.2] * 3, [0.2] * 3, [0.1] * 3])
        with pytest.raises(CalibrationError):
            fit_radiometric(raw, raw)

    def test_non_monotone_warns(self):
        u = np.linspace(0, 1, 10)
        raw = np.stack([u] * 3, axis=1)
        with pytest.warns(UserWarning, match="monotone"):
            fit_radiometric(raw, -2.0 * raw**2 + 1.0 * raw + 0.1)


class TestApply:
    def test_identity_curve(self):
        img = np.random.default_rng(2).random((5, 5, 3))
        np.testing.assert_array_equal(apply_radiometric(RadiometricCurve.identity(), img), img)

    def test_square(self):
        curve = RadiometricCurve(np.tile([1.0, 0.0, 0.0], (3, 1)))
        np.testing.assert_allclose(apply_radiometric(curve, np.full(3, 0.5)), 0.25)

    def test_clamped(self):
        curve = RadiometricCurve(np.tile([0.0, 1.0, -0.5], (3, 1)))
        assert apply_radiometric(curve, np.zeros(3)).min() == 0.0

    def test_round_trip(self):
        u = np.linspace(0, 1, 17)
        raw = np.stack([u, u**1.1, u**0.9], axis=1)
        ref = 0.25 * raw**2 + 0.7 * raw + 0.01
        curve = fit_radiometric(raw, ref)
        np.testing.assert_allclose(apply_radiometric(curve, raw), ref, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1))
    def test_inverse(self, u):
        curve = RadiometricCurve(np.tile([0.3, 0.6, 0.02], (3, 1)))
        x = np.full(3, u)
        np.testing.assert_allclose(curve.inverse(curve(x)), x, atol=1e-12)


class TestGoldenSection:
    def test_quadratic(self):
        assert golden_section(lambda x: (x - 1.7) ** 2, 0, 5) == pytest.approx(1.7, rel=1e-6)

    def test_scale_matches_weighted_median(self):
        rng = np.random.default_rng(4)
        unit = rng.uniform(0.1, 1, 200)
        obs = 2.5 * unit * rng.uniform(0.8, 1.3, 200)
        assert fit_scale_l1(unit, obs) == pytest.approx(weighted_median_ratio(unit, obs), rel=1e-9)


class TestIntensity:
    def test_clean_recovery(self):
        inten = np.array([2.0, 3.0, 4.0])
        got = calibrate_light_intensity(graycard_images(inten), LightRig.ring(), GEOM)
        np.testing.assert_allclose(got, np.tile(inten, (12, 1)), rtol=1e-3)

    def test_scale_equivariance(self):
        imgs = graycard_images(np.array([1.0, 1.5, 2.0]))
        a = calibrate_light_intensity(imgs, LightRig.ring(), GEOM)
        b = calibrate_light_intensity(0.5 * imgs, LightRig.ring(), GEOM)
        np.testing.assert_array_equal(b, 0.5 * a)

    def test_salt_and_pepper(self):
        rng = np.random.default_rng(7)
        imgs = graycard_images(np.array([2.0, 3.0, 4.0]))
        mask = rng.random(imgs.shape[:3]) < 0.1
        salt = rng.random(imgs.shape[:3]) < 0.5
        imgs[mask & salt] = 1.0
        imgs[mask & ~salt] = 0.0
        got = calibrate_light_intensity(imgs, LightRig.ring(), GEOM)
        np.testing.assert_allclose(got, np.tile([2.0, 3.0, 4.0], (12, 1)), rtol=0.02)

    def test_local_optimality(self):
        imgs = graycard_images(np.array([2.0, 2.0, 2.0]))
        imgs = imgs * np.random.default_rng(3).uniform(0.9, 1.1, imgs.shape)
        got = calibrate_light_intensity(imgs, LightRig.ring(), GEOM)
        unit = render_lights(gray_card_maps(16), LightRig.ring(1.0), GEOM, range(12), specular=False)
        for k in (0, 5):
            for ch in range(3):
                def obj(c):
                    return np.abs(c * unit[k, ..., ch] - imgs[k, ..., ch]).sum()
                c = got[k, ch]
                assert obj(c) <= obj(c * (1 + 1e-3)) and obj(c) <= obj(c * (1 - 1e-3))

    def test_black_image_warns(self):
        imgs = graycard_images(np.array([2.0, 2.0, 2.0]))
        imgs[4] = 0.0
        with pytest.warns(UserWarning, match="black"):
            got = calibrate_light_intensity(imgs, LightRig.ring(), GEOM)
        assert np.all(got[4] == 0)

    def test_wrong_count(self):
        with pytest.raises(CalibrationError):
            calibrate_light_intensity(np.zeros((11, 16, 16, 3)), LightRig.ring(), GEOM)

    def test_card_spec(self):
        with pytest.raises(ValueError):
            GrayCardSpec(1.5)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            GrayCardSpec(0.18)
