import json

import numpy as np
import pytest

from ringsvbrdf import fileio
from ringsvbrdf.cli import image_metrics, main, parse_lights, requantize
from ringsvbrdf.calibration import RadiometricCurve, gray_card_maps
from ringsvbrdf.render import LightRig, SceneGeometry, render_lights
from ringsvbrdf.synth import procedural_material

CURVE = RadiometricCurve(np.tile([0.2, 0.8, 0.0], (3, 1)))


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def material_dir(tmp_path):
    fileio.save_svbrdf(tmp_path / "mat", procedural_material(16, 3, "glossy"))
    return tmp_path / "mat"


@pytest.fixture
def rig_file(tmp_path):
    fileio.save_rig(tmp_path / "rig.json", LightRig.ring(), CURVE)
    return tmp_path / "rig.json"


class TestHelpers:
    def test_parse_lights(self):
        assert parse_lights("even") == [0, 2, 4, 6, 8, 10]
        assert parse_lights("odd") == [1, 3, 5, 7, 9, 11]
        assert parse_lights("all") == list(range(12))
        assert parse_lights("0,6") == [0, 6]

    @pytest.mark.parametrize("bad", ["", "12", "1,1", "x"])
    def test_parse_lights_bad(self, bad):
        with pytest.raises(ValueError):
            parse_lights(bad)

    def test_metrics_identity(self):
        x = np.random.default_rng(0).uniform(0, 1, (2, 16, 16, 3))
        m = image_metrics(x, x)
        assert m["one_minus_ssim"]["mean"] == 0.0 and m["l1"]["per_light"] == [0.0, 0.0]

    def test_requantize_is_idempotent(self):
        x = np.random.default_rng(1).uniform(0, 1, (4, 4, 3))
        once = requantize(x, CURVE)
        np.testing.assert_allclose(requantize(once, CURVE), once, atol=1e-12)


class TestRenderEval:
    def test_render_then_eval_self_is_zero(self, capsys, tmp_path, material_dir, rig_file):
        cap = tmp_path / "cap"
        code, _, err = run(capsys, "render", "--svbrdf", material_dir, "--rig", rig_file, "--depth", 420,
                           "--all-lights", "--out", cap)
        assert code == 0, err
        code, out, err = run(capsys, "eval", "--pred", material_dir, "--capture", cap, "--rig", rig_file)
        assert code == 0, err
        rep = json.loads(out)
        assert rep["metrics"]["one_minus_ssim"]["mean"] == 0.0
        assert rep["metrics"]["l1"]["mean"] == 0.0
        assert rep["lights"] == [1, 3, 5, 7, 9, 11]

    def test_single_light(self, capsys, tmp_path, material_dir):
        code, _, _ = run(capsys, "render", "--svbrdf", material_dir, "--depth", 400, "--light", 3,
                         "--out", tmp_path / "one")
        assert code == 0
        assert (tmp_path / "one" / "img_l03.png").is_file()

    def test_existing_output_needs_force(self, capsys, tmp_path, material_dir):
        args = ["render", "--svbrdf", material_dir, "--depth", 400, "--light", 0, "--out", tmp_path / "o"]
        assert run(capsys, *args)[0] == 0
        code, _, err = run(capsys, *args)
        assert code == 1 and "--force" in err
        assert run(capsys, *args, "--force")[0] == 0

    def test_depth_guard(self, capsys, tmp_path, material_dir):
        code, _, err = run(capsys, "render", "--svbrdf", material_dir, "--depth", 900, "--light", 0,
                           "--out", tmp_path / "o")
        assert code == 1 and "depth" in err
        assert not (tmp_path / "o").exists()
        code, _, _ = run(capsys, "render", "--svbrdf", material_dir, "--depth", 900, "--light", 0,
                         "--allow-any-depth", "--out", tmp_path / "o")
        assert code == 0

    def test_unknown_metric(self, capsys, tmp_path, material_dir):
        run(capsys, "render", "--svbrdf", material_dir, "--depth", 420, "--all-lights", "--out", tmp_path / "c")
        code, _, err = run(capsys, "eval", "--pred", material_dir, "--capture", tmp_path / "c", "--metrics", "psnr")
        assert code == 1 and "psnr" in err


class TestCalibrate:
    def test_radiometric(self, capsys, tmp_path):
        u = np.linspace(0, 1, 12).tolist()
        rows = ["raw_r,raw_g,raw_b,ref_r,ref_g,ref_b"]
        rows += [",".join(map(repr, [x, x, x] + [0.25 * x * x + 0.7 * x + 0.01] * 3)) for x in u]
        (tmp_path / "s.csv").write_text("\n".join(rows) + "\n")
        code, out, err = run(capsys, "calibrate", "radiometric", "--samples", tmp_path / "s.csv",
                             "--out", tmp_path / "rig.json")
        assert code == 0, err
        assert json.loads(out)["monotone"] is True
        _, curve = fileio.load_rig(tmp_path / "rig.json")
        np.testing.assert_allclose(curve.coeffs, np.tile([0.25, 0.7, 0.01], (3, 1)), atol=1e-9)

    def test_intensity_round_trip(self, capsys, tmp_path):
        truth = np.array([1.6, 1.8, 2.0])
        geom = SceneGeometry(450, 32)
        imgs = render_lights(gray_card_maps(32), LightRig.ring(truth).scaled(0.5), geom, range(12), specular=False)
        fileio.save_capture_set(tmp_path / "gc", imgs, 450, 0.5)
        fileio.save_rig(tmp_path / "rig.json", LightRig.ring())
        code, out, err = run(capsys, "calibrate", "intensity", "--graycard", tmp_path / "gc", "--rig", tmp_path / "rig.json")
        assert code == 0, err
        rig, _ = fileio.load_rig(tmp_path / "rig.json")
        # 8-bit quantization limits the match
        np.testing.assert_allclose(rig.intensities, np.tile(truth, (12, 1)), rtol=0.01)


class TestPipelines:
    @pytest.fixture
    def synth_dir(self, capsys, tmp_path):
        code, _, err = run(capsys, "gen-synth", "--count", 2, "--resolution", 16, "--pool-size", 3,
                           "--seed", 5, "--out", tmp_path / "syn")
        assert code == 0, err
        return tmp_path / "syn"

    def test_gen_synth_layout(self, synth_dir):
        index = fileio.read_json(synth_dir / "index.json")
        assert [e["name"] for e in index["examples"]] == ["ex_0000", "ex_0001"]
        imgs, geom, meta = fileio.load_capture_set(synth_dir / "ex_0000" / "capture")
        assert imgs.shape == (12, 16, 16, 3)
        assert meta["input_lights"] == [0, 6, 8, 2, 4, 10]
        assert fileio.load_svbrdf(synth_dir / "ex_0000" / "gt").resolution == (16, 16)

    def test_optimize_direct_improves_held_out(self, capsys, tmp_path, synth_dir):
        ex = synth_dir / "ex_0001"
        code, out, err = run(capsys, "optimize", "direct", "--capture", ex / "capture", "--rig",
                             ex / "rig_inputs.json", "--iters", 300, "--out", tmp_path / "fit")
        assert code == 0, err
        rep = json.loads(out)
        assert rep["held_out_lights"] == [1, 3, 5, 7, 9, 11]
        assert rep["held_out_after"]["one_minus_ssim"]["mean"] < rep["held_out_before"]["one_minus_ssim"]["mean"]
        assert rep["best_loss"] < rep["initial_loss"]
        assert fileio.load_svbrdf(tmp_path / "fit").is_valid()
        assert (tmp_path / "fit" / "loss_trace.csv").read_text().startswith("iteration,loss\n0,")

    def test_train_then_optimize_network(self, capsys, tmp_path, synth_dir):
        code, out, err = run(capsys, "train-toy", "--steps", 2, "--batch", 1, "--resolution", 16, "--inputs", 6,
                             "--pool-size", 2, "--out", tmp_path / "net")
        assert code == 0, err
        assert json.loads(out)["steps"] == 2
        ex = synth_dir / "ex_0000"
        code, out, err = run(capsys, "optimize", "network", "--capture", ex / "capture", "--weights",
                             tmp_path / "net", "--iters", 3, "--out", tmp_path / "fit")
        assert code == 0, err
        rep = json.loads(out)
        assert rep["iterations"] == 3
        assert fileio.load_checkpoint(tmp_path / "fit" / "weights").num_params() > 0

    def test_missing_capture(self, capsys, tmp_path):
        code, _, err = run(capsys, "optimize", "direct", "--capture", tmp_path / "nope", "--out", tmp_path / "o")
        assert code == 1 and "missing" in err
