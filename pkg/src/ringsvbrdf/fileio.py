"""On-disk formats: capture sets, SVBRDF archives, rig files, checkpoints.

Every JSON file and manifest carries ``format_version``; files with any
other version are rejected. JSON is written with sorted keys so reports
are byte-identical across runs.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path

import cv2
import numpy as np

from .calibration import RadiometricCurve
from .maps import R_MIN, SvbrdfMaps
from .render import N_LIGHTS, LightRig, SceneGeometry
from .styled_net import NetConfig, StyledNet

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
U8 = 255
U16 = 65535
LIGHT_LEVELS = (0.5, 1.0)
SAMPLE_HEADER = ["raw_r", "raw_g", "raw_b", "ref_r", "ref_g", "ref_b"]


class FormatError(ValueError):
    """Malformed, missing or wrongly versioned file."""


def image_name(light: int) -> str:
    return f"img_l{light:02d}.png"


# ---------------------------------------------------------------- json

def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    obj = dict(obj)
    obj["format_version"] = FORMAT_VERSION
    _atomic_write_text(Path(path), dumps(obj))


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing file {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
    _check_version(obj.get("format_version"), path)
    return obj


def _check_version(version, path):
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {version!r} (expected {FORMAT_VERSION})")


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def check_writable(path, force: bool) -> None:
    if Path(path).exists() and not force:
        raise FileExistsError(f"{path} exists (use --force to overwrite)")


@contextlib.contextmanager
def output_dir(path, force: bool = False):
    """Yield a scratch directory that is moved to ``path`` only on success."""
    path = Path(path)
    check_writable(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if path.exists():
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    os.replace(tmp, path)


# ---------------------------------------------------------------- png

def _write_png(path, rgb_or_gray) -> None:
    img = rgb_or_gray
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), img):
        raise FormatError(f"could not write {path}")


def _read_png(path, dtype) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing image {path.name} in {path.parent}")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"could not decode {path}")
    if img.dtype != dtype:
        raise FormatError(f"{path}: expected {np.dtype(dtype).name} pixels, got {img.dtype.name}")
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return img


def quantize(x, levels: int) -> np.ndarray:
    dtype = np.uint8 if levels == U8 else np.uint16
    return np.round(np.clip(x, 0.0, 1.0) * levels).astype(dtype)


# ---------------------------------------------------------------- rig

def _rms_list(curve):
    rms = np.zeros(3) if curve.residual_rms is None else curve.residual_rms
    return np.broadcast_to(np.asarray(rms, dtype=np.float64), (3,)).tolist()


def rig_to_dict(rig: LightRig, curve: RadiometricCurve) -> dict:
    return {
        "positions_mm": rig.positions_mm.tolist(),
        "intensities": rig.intensities.tolist(),
        "radius_mm": float(rig.radius_mm),
        "falloff": bool(rig.falloff),
        "fresnel": rig.fresnel,
        "radiometric": {"coeffs": curve.coeffs.tolist(), "residual_rms": _rms_list(curve)},
    }


def save_rig(path, rig: LightRig, curve: RadiometricCurve | None = None) -> None:
    write_json(path, rig_to_dict(rig, curve or RadiometricCurve.identity()))


def load_rig(path) -> tuple[LightRig, RadiometricCurve]:
    d = read_json(path)
    try:
        rig = LightRig(d["positions_mm"], d["intensities"], float(d["radius_mm"]),
                       bool(d["falloff"]), d["fresnel"])
        rad = d["radiometric"]
        curve = RadiometricCurve(np.asarray(rad["coeffs"], dtype=np.float64), rad.get("residual_rms"))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: invalid rig file ({e})") from e
    return rig, curve


def load_samples_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Calibration patches: ``raw`` and ``reference`` arrays of shape (N, 3)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != SAMPLE_HEADER:
            raise FormatError(f"{path}: header must be {','.join(SAMPLE_HEADER)}")
        try:
            rows = [[float(v) for v in row] for row in reader if row]
        except ValueError as e:
            raise FormatError(f"{path}, line {reader.line_num}: {e}") from e
    if any(len(r) != 6 for r in rows):
        raise FormatError(f"{path}: every row needs 6 values")
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    return arr[:, :3], arr[:, 3:]


# ---------------------------------------------------------------- captures

def save_capture_set(path, linear_images, depth_mm: float, light_level: float = 1.0,
                     curve: RadiometricCurve | None = None, extra: dict | None = None) -> None:
    """Store 12 linear images as 8-bit raw PNGs via the inverse curve."""
    imgs = np.asarray(linear_images, dtype=np.float64)
    if imgs.shape[0] != N_LIGHTS or imgs.ndim != 4:
        raise ValueError(f"expected {N_LIGHTS} RGB images, got shape {imgs.shape}")
    curve = curve or RadiometricCurve.identity()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for k in range(N_LIGHTS):
        _write_png(path / image_name(k), quantize(curve.inverse(np.clip(imgs[k], 0.0, None)), U8))
    meta = {
        "depth_mm": float(depth_mm),
        "light_intensity_level": float(light_level),
        "resolution": int(imgs.shape[1]),
        "radiometric": curve.coeffs.tolist(),
    }
    meta.update(extra or {})
    write_json(path / "meta.json", meta)


def load_capture_meta(path) -> dict:
    meta = read_json(Path(path) / "meta.json")
    for key in ("depth_mm", "light_intensity_level", "resolution"):
        if key not in meta:
            raise FormatError(f"{path}/meta.json: missing {key}")
    if float(meta["light_intensity_level"]) not in LIGHT_LEVELS:
        raise FormatError(f"{path}/meta.json: light_intensity_level must be one of {LIGHT_LEVELS}")
    return meta


def load_raw_images(path) -> np.ndarray:
    """The 12 raw images scaled to [0, 1], without linearization."""
    path = Path(path)
    imgs = [_read_png(path / image_name(k), np.uint8) for k in range(N_LIGHTS)]
    shape = imgs[0].shape
    for k, im in enumerate(imgs):
        if im.shape != shape:
            raise FormatError(f"{image_name(k)} has shape {im.shape}, expected {shape}")
        if im.ndim != 3 or im.shape[2] != 3:
            raise FormatError(f"{image_name(k)} is not RGB")
    return np.stack(imgs).astype(np.float64) / U8


def load_capture_set(path, curve: RadiometricCurve | None = None, strict_depth: bool = True):
    """Linear images ``(12, H, W, 3)``, geometry and metadata of a capture set.

    ``curve`` overrides the curve recorded in ``meta.json``; with neither,
    the raw values are taken as linear.
    """
    meta = load_capture_meta(path)
    raw = load_raw_images(path)
    if raw.shape[1] != raw.shape[2]:
        raise FormatError(f"{path}: images must be square, got {raw.shape[1:3]}")
    if raw.shape[1] != int(meta["resolution"]):
        raise FormatError(f"{path}: images are {raw.shape[1]} px but meta says {meta['resolution']}")
    if curve is None:
        coeffs = meta.get("radiometric")
        curve = RadiometricCurve(np.asarray(coeffs, dtype=np.float64)) if coeffs is not None else RadiometricCurve.identity()
    geom = SceneGeometry(float(meta["depth_mm"]), raw.shape[1], strict_depth=strict_depth)
    return np.clip(curve(raw), 0.0, None), geom, meta


def capture_rig(rig: LightRig, meta: dict) -> LightRig:
    """Rig intensities scaled to the capture's light level."""
    return rig.scaled(float(meta["light_intensity_level"]))


# ---------------------------------------------------------------- svbrdf

_MAP_FILES = {"normals": "normal.png", "diffuse": "diffuse.png",
              "roughness": "roughness.png", "specular": "specular.png"}


def save_svbrdf(path, maps: SvbrdfMaps, extra: dict | None = None) -> None:
    maps.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_png(path / _MAP_FILES["normals"], quantize((maps.normals + 1.0) / 2.0, U16))
    _write_png(path / _MAP_FILES["diffuse"], quantize(maps.diffuse, U16))
    _write_png(path / _MAP_FILES["roughness"], quantize(maps.roughness, U16))
    _write_png(path / _MAP_FILES["specular"], quantize(maps.specular, U16))
    manifest = {"resolution": int(maps.resolution[0]), "normal_encoding": "(n+1)/2", "bit_depth": 16}
    manifest.update(extra or {})
    write_json(path / "material.json", manifest)


def load_svbrdf(path, normal_tol: float = 1e-3) -> SvbrdfMaps:
    path = Path(path)
    read_json(path / "material.json")
    raw = {f: _read_png(path / name, np.uint16).astype(np.float64) / U16 for f, name in _MAP_FILES.items()}
    n = raw["normals"] * 2.0 - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    # 16-bit rounding alone moves the norm by ~3e-5
    if np.any(np.abs(norm - 1.0) > normal_tol):
        log.warning("%s: stored normals are not unit length; renormalizing", path)
    if np.any(norm == 0) or np.any(n[..., 2] <= 0):
        raise FormatError(f"{path}: normals must point toward the camera")
    rough = raw["roughness"]
    if rough.ndim == 3:
        rough = rough[..., 0]
    # R_MIN is not a 16-bit code; undo the rounding below it
    rough = np.where((rough < R_MIN) & (rough > R_MIN - 1.0 / U16), R_MIN, rough)
    maps = SvbrdfMaps(n / norm, raw["diffuse"], rough, raw["specular"])
    try:
        maps.validate()
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    return maps


def is_svbrdf_dir(path) -> bool:
    return (Path(path) / "material.json").is_file()


def load_pool(path) -> list[SvbrdfMaps]:
    """All SVBRDF archives directly under ``path`` (sorted by name)."""
    path = Path(path)
    if is_svbrdf_dir(path):
        return [load_svbrdf(path)]
    dirs = sorted(p for p in path.iterdir() if is_svbrdf_dir(p)) if path.is_dir() else []
    if not dirs:
        raise FormatError(f"no SVBRDF archives under {path}")
    return [load_svbrdf(p) for p in dirs]


# ---------------------------------------------------------------- checkpoints

def _ckpt_paths(prefix):
    prefix = Path(prefix)
    if prefix.suffix in (".bin", ".manifest"):
        prefix = prefix.with_suffix("")
    return prefix.with_suffix(".bin"), prefix.with_suffix(".manifest")


def save_checkpoint(prefix, model: StyledNet) -> tuple[Path, Path]:
    """Write ``<prefix>.bin`` (little-endian float32) and ``<prefix>.manifest``.

    Manifest lines: ``format_version``, the network config, then one
    ``param <name> <shape> <byte offset>`` line per tensor.
    """
    bin_path, man_path = _ckpt_paths(prefix)
    cfg = model.config
    lines = [
        f"format_version {FORMAT_VERSION}",
        f"arch {cfg.arch}",
        f"n_inputs {cfg.n_inputs}",
        f"widths {','.join(map(str, cfg.widths))}",
        f"style_dim {cfg.style_dim}",
        f"mean_channels {cfg.mean_channels}",
        f"kernel {cfg.kernel}",
    ]
    chunks = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        shape = ",".join(map(str, arr.shape)) or "scalar"
        lines.append(f"param {name} {shape} {offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(b"".join(chunks))
    _atomic_write_text(man_path, "\n".join(lines) + "\n")
    return bin_path, man_path


def load_checkpoint(prefix) -> StyledNet:
    bin_path, man_path = _ckpt_paths(prefix)
    if not man_path.is_file() or not bin_path.is_file():
        raise FormatError(f"missing checkpoint {bin_path} / {man_path}")
    header, params_spec = {}, []
    for line in man_path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "param":
            if len(parts) != 4:
                raise FormatError(f"{man_path}: bad line {line!r}")
            params_spec.append((parts[1], parts[2], int(parts[3])))
        else:
            header[parts[0]] = " ".join(parts[1:])
    version = header.get("format_version")
    _check_version(int(version) if version and version.isdigit() else version, man_path)
    cfg = NetConfig(
        arch=header["arch"],
        n_inputs=int(header["n_inputs"]),
        widths=tuple(int(w) for w in header["widths"].split(",")),
        style_dim=int(header["style_dim"]),
        mean_channels=int(header["mean_channels"]),
        kernel=int(header["kernel"]),
    )
    blob = bin_path.read_bytes()
    params = {}
    for name, shape_s, offset in params_spec:
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"{bin_path}: truncated at parameter {name}")
        params[name] = np.frombuffer(blob[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
    model = StyledNet(cfg, params)
    expected = set(StyledNet(cfg, seed=0).params)
    if set(params) != expected:
        raise FormatError(f"{man_path}: parameter names do not match the {cfg.arch} config")
    return model


def write_trace_csv(path, trace, header: str = "iteration,loss") -> None:
    body = "".join(f"{i},{v!r}\n" for i, v in enumerate(trace))
    _atomic_write_text(Path(path), header + "\n" + body)
