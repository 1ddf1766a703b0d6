"""Synthetic scene generation and on-disk scene persistence.

A scene directory is self-contained and versioned::

    scene.toml            manifest (schema, camera, frame count, generator info)
    mesh.txt              cloth template, including lumped masses
    frames/rgb_NNNN.png   8-bit RGB targets, frame 0 is the rest template
    frames/mask_NNNN.png  8-bit grayscale coverage masks
    ground_truth/         evaluation-only data, never read during reconstruction

Targets are stored quantized to 8 bits and loaded back as float in [0, 1], so
generation and reconstruction observe exactly the same images.  Ground-truth
float arrays (trajectory, depths, point clouds, accelerations) are written as
individual .npy files; together with the plain-text manifest this makes a
fixed-seed scene byte-identical across runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
from PIL import Image

from .geometry import (ClothMesh, build_template, compute_masses, load_mesh,
                       rest_quantities, save_mesh, top_row_indices)
from .metrics import METRIC_SAMPLE_SEED, sample_surface
from .physics import SimParams, SolverConfig, SolverError, Stiffness, simulate
from .pipeline import SfTProblem
from .render import Camera, rasterize

SCHEMA_VERSION = 1
WIND_MODELS = ("none", "lateral", "camera_axis", "crumple")
PINNING_MODES = ("top_row", "top_corners")


class SceneError(Exception):
    """Invalid scene configuration, malformed scene directory, or generation failure."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    """Everything needed to generate a synthetic scene deterministically.

    ``frames`` counts dynamic frames; the stored scene has ``frames + 1``
    frames because frame 0 is the rest template.  Accelerations are in N/kg;
    per-vertex forces are mass-weighted before simulation.
    """

    rows: int = 25
    cols: int = 25
    spacing: float = 0.02
    density: float = 0.1
    pinning: str = "top_row"
    frames: int = 30
    frame_dt: float = 0.02
    width: int = 256
    height: int = 256
    texture_size: int = 64
    wind: str = "lateral"
    wind_amplitude: float = 5.0
    wind_jitter: float = 0.15
    constant_accel: tuple[float, float, float] = (0.0, -3.0, 0.0)
    stretch: float = 300.0
    bend: float = 2e-3
    shear: float = 3e-4
    camera_distance: float | None = None
    cloud_points: int = 2000
    seed: int = 0

    def validate(self) -> None:
        if self.rows < 2 or self.cols < 2:
            raise SceneError(f"grid must be at least 2x2, got {self.rows}x{self.cols}")
        if self.spacing <= 0 or self.density <= 0:
            raise SceneError("spacing and density must be positive")
        if self.pinning not in PINNING_MODES:
            raise SceneError(f"unknown pinning '{self.pinning}', expected one of {PINNING_MODES}")
        if self.frames < 1:
            raise SceneError(f"need at least one dynamic frame, got {self.frames}")
        if self.frame_dt <= 0:
            raise SceneError("frame_dt must be positive")
        if self.width < 8 or self.height < 8:
            raise SceneError(f"resolution too small: {self.width}x{self.height}")
        if self.texture_size < 4:
            raise SceneError("texture_size must be at least 4")
        if self.wind not in WIND_MODELS:
            raise SceneError(f"unknown wind model '{self.wind}', expected one of {WIND_MODELS}")
        if self.wind_amplitude < 0 or self.wind_jitter < 0:
            raise SceneError("wind amplitude and jitter must be non-negative")
        if self.stretch <= 0 or self.bend <= 0 or self.shear <= 0:
            raise SceneError("ground-truth stiffnesses must be positive")
        if self.camera_distance is not None and self.camera_distance <= 0:
            raise SceneError("camera_distance must be positive")
        if self.cloud_points < 1:
            raise SceneError("cloud_points must be at least 1")
        if len(self.constant_accel) != 3:
            raise SceneError("constant_accel must have three components")


# ---------------------------------------------------------------------------
# Deterministic generator pieces
# ---------------------------------------------------------------------------


def _smooth_series(rng: np.random.Generator, n: int, window: int) -> np.ndarray:
    """(n,) moving-average-filtered standard normal series."""
    raw = rng.standard_normal(n + window - 1)
    kernel = np.full(window, 1.0 / window)
    return np.convolve(raw, kernel, mode="valid")


def _smooth_field(rng: np.random.Generator, n: int, n_vertices: int,
                  window: int) -> np.ndarray:
    """(n, N, 3) per-vertex noise, moving-averaged along the frame axis."""
    raw = rng.standard_normal((n + window - 1, n_vertices, 3))
    cs = np.cumsum(raw, axis=0)
    out = np.empty((n, n_vertices, 3))
    out[0] = cs[window - 1] / window
    if n > 1:
        out[1:] = (cs[window:] - cs[:-window]) / window
    return out


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def make_wind(config: SceneConfig, rng: np.random.Generator,
              view_dir: np.ndarray, n_vertices: int) -> np.ndarray:
    """Per-frame, per-vertex wind accelerations (frames, N, 3) in N/kg.

    All models share a structure of a global direction with a smooth temporal
    amplitude plus optional smooth per-vertex jitter.  "camera_axis" ramps
    monotonically along the viewing direction so the free end recedes from the
    camera while the silhouette barely changes; "crumple" adds strong
    spatially-uncorrelated jitter that wrinkles the sheet.
    """
    nf, amp = config.frames, config.wind_amplitude
    if config.wind == "none":
        return np.zeros((nf, n_vertices, 3))
    t = np.arange(nf, dtype=float)
    if config.wind == "lateral":
        direction = np.array([1.0, -0.25, 0.0])
        direction /= np.linalg.norm(direction)
        series = _smooth_series(rng, nf, window=5)
        profile = amp * (0.6 + 0.4 * np.sin(2.0 * np.pi * t / 14.0)) * (1.0 + 0.25 * series)
        jitter = config.wind_jitter * amp * _smooth_field(rng, nf, n_vertices, window=5)
        return profile[:, None, None] * direction + 0.5 * jitter
    if config.wind == "camera_axis":
        # Monotone ramp, no temporal noise on the axis component; jitter stays
        # in the image plane so it cannot disturb depth monotonicity.
        profile = amp * _smoothstep((t + 1.0) / 10.0)
        jitter = config.wind_jitter * amp * _smooth_field(rng, nf, n_vertices, window=5)
        jitter -= (jitter @ view_dir)[..., None] * view_dir
        return profile[:, None, None] * view_dir + 0.2 * jitter
    if config.wind == "crumple":
        profile = 0.7 * amp * _smoothstep((t + 1.0) / 8.0)
        base = profile[:, None, None] * view_dir
        rough = _smooth_field(rng, nf, n_vertices, window=3)
        return base + config.wind_jitter * amp * rough
    raise SceneError(f"unknown wind model '{config.wind}'")


def make_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural (size, size, 3) texture: smooth color field plus a faint grid.

    Low-frequency color gives broad photometric gradients; the grid overlay
    adds high-frequency content that localizes image alignment.
    """
    coarse = rng.uniform(0.15, 0.85, size=(6, 6, 3))
    tex = _bilinear_resize(coarse, size, size)
    cell = max(size // 8, 1)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    checker = ((yy // cell + xx // cell) % 2).astype(float) - 0.5
    tex += 0.18 * checker[:, :, None]
    return np.clip(tex, 0.03, 0.97)


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of an (h, w, 3) image."""
    h, w = img.shape[:2]
    ty = np.linspace(0.0, h - 1.0, out_h)
    tx = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.clip(np.floor(ty).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(tx).astype(int), 0, w - 2)
    fy = (ty - y0)[:, None, None]
    fx = (tx - x0)[None, :, None]
    a = img[y0][:, x0]
    b = img[y0][:, x0 + 1]
    c = img[y0 + 1][:, x0]
    d = img[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def default_camera(mesh: ClothMesh, width: int, height: int,
                   distance: float | None = None) -> Camera:
    """Fronto-parallel camera framing the rest template at ~65% of the view."""
    lo = mesh.rest_positions.min(axis=0)
    hi = mesh.rest_positions.max(axis=0)
    center = 0.5 * (lo + hi)
    extent = float(max(hi[0] - lo[0], hi[1] - lo[1]))
    if extent <= 0:
        raise SceneError("degenerate template extent")
    if distance is None:
        distance = 2.5 * extent
    fx = 0.65 * min(width, height) * distance / extent
    eye = center + np.array([0.0, 0.0, distance])
    return Camera.look_at(eye, center, fx=fx, fy=fx, width=width, height=height)


def _build_mesh(config: SceneConfig) -> ClothMesh:
    if config.pinning == "top_row":
        pinned = top_row_indices(config.rows, config.cols)
    else:
        pinned = [0, config.cols - 1]
    mesh = build_template(config.rows, config.cols, config.spacing, pinned=pinned)
    mesh.masses = compute_masses(mesh, config.density)
    return mesh


def _sim_params(frame_dt: float) -> SimParams:
    """Fixed 5 ms substeps; the frame interval must be a multiple of them."""
    substeps = int(round(frame_dt / 0.005))
    if substeps < 1 or abs(substeps * 0.005 - frame_dt) > 1e-12:
        raise SceneError(f"frame_dt {frame_dt} is not a multiple of the 5 ms substep")
    return SimParams(dt=0.005, substeps=substeps)


# ---------------------------------------------------------------------------
# Minimal TOML writing (tomli only reads)
# ---------------------------------------------------------------------------


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            raise SceneError(f"cannot store non-finite float {v} in a manifest")
        return repr(v)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise SceneError(f"cannot serialize {type(value).__name__} to TOML")


def write_toml(path: Path, data: dict) -> None:
    """Write a two-level dict as TOML; floats round-trip exactly via repr."""
    lines: list[str] = []
    for key, value in data.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for k, v in value.items():
                lines.append(f"{k} = {_toml_value(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except FileNotFoundError:
        raise
    except tomli.TOMLDecodeError as exc:
        raise SceneError(f"{path}: malformed manifest ({exc})") from exc


# ---------------------------------------------------------------------------
# Image I/O (8-bit quantized, deterministic bytes)
# ---------------------------------------------------------------------------


def save_image(path: Path, array: np.ndarray) -> None:
    """Save a float image in [0, 1] as 8-bit PNG; (H, W) gray or (H, W, 3) RGB."""
    arr = np.asarray(array, dtype=float)
    if not np.isfinite(arr).all() or arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise SceneError(f"image values outside [0, 1] for {path}")
    quant = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if quant.ndim == 2 else "RGB"
    Image.fromarray(quant, mode=mode).save(path, format="PNG")


def load_image(path: Path) -> np.ndarray:
    """Load an 8-bit PNG back to float64 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Scene container
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    """A loaded scene: template, camera, quantized targets, and metadata.

    ``target_rgb`` is (n_frames, H, W, 3) and ``target_mask`` (n_frames, H, W),
    frame 0 being the rest template.  Ground truth lives in a separate
    directory and is loaded only through :func:`load_ground_truth`.
    """

    mesh: ClothMesh
    camera: Camera
    target_rgb: np.ndarray
    target_mask: np.ndarray
    frame_dt: float
    metadata: dict = field(default_factory=dict)
    scene_dir: Path | None = None

    @property
    def n_frames(self) -> int:
        return self.target_rgb.shape[0]

    def validate(self) -> None:
        f = self.n_frames
        h, w = self.camera.height, self.camera.width
        if self.target_rgb.shape != (f, h, w, 3):
            raise SceneError(f"target_rgb shape {self.target_rgb.shape} != ({f}, {h}, {w}, 3)")
        if self.target_mask.shape != (f, h, w):
            raise SceneError(f"target_mask shape {self.target_mask.shape} != ({f}, {h}, {w})")
        if f < 2:
            raise SceneError("scene needs the template frame plus at least one dynamic frame")
        if self.frame_dt <= 0:
            raise SceneError("frame_dt must be positive")
        self.mesh.validate()
        if self.mesh.masses is None:
            raise SceneError("scene template must carry masses")

    def to_problem(self, texture: np.ndarray, weights=None, solver=None) -> SfTProblem:
        """Bundle the scene and a texture estimate into a reconstruction problem."""
        from .losses import LossWeights

        kwargs = {}
        if weights is not None:
            kwargs["weights"] = weights if isinstance(weights, LossWeights) else LossWeights(**weights)
        if solver is not None:
            kwargs["solver"] = solver
        problem = SfTProblem(
            mesh=self.mesh, rest=rest_quantities(self.mesh), camera=self.camera,
            target_rgb=self.target_rgb, target_mask=self.target_mask,
            texture=np.asarray(texture, dtype=float),
            params=_sim_params(self.frame_dt), **kwargs)
        problem.validate()
        return problem


@dataclass
class GroundTruth:
    """Evaluation-only data: trajectory, depths, point clouds, true parameters."""

    trajectory: np.ndarray     # (n_frames, N, 3) incl. template frame 0
    depths: np.ndarray         # (n_frames, H, W), +inf background
    clouds: np.ndarray         # (n_frames - 1, P, 3), per dynamic frame
    dynamic_accel: np.ndarray  # (n_frames - 1, N, 3) in N/kg
    params: dict               # stiffnesses, constant accel, generator knobs
    texture: np.ndarray        # (S, S, 3) float in [0, 1]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def gen_scene(config: SceneConfig, out_dir: Path) -> Path:
    """Generate a synthetic scene directory; byte-identical for a fixed seed.

    Simulates the ground-truth trajectory under the configured wind, renders
    quantized RGB/mask targets, and stores evaluation data (trajectory, depth
    maps, sampled point clouds, true parameters) under ``ground_truth/``.
    """
    config.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise SceneError(f"output directory {out} exists and is not empty")
    rng = np.random.default_rng(config.seed)

    mesh = _build_mesh(config)
    rest = rest_quantities(mesh)
    camera = default_camera(mesh, config.width, config.height, config.camera_distance)
    texture = make_texture(rng, config.texture_size)

    eye = camera.position
    target = mesh.rest_positions.mean(axis=0)
    view_dir = target - eye
    view_dir = view_dir / np.linalg.norm(view_dir)

    accel = make_wind(config, rng, view_dir, mesh.n_vertices)
    accel = accel + np.asarray(config.constant_accel, dtype=float)
    forces = mesh.masses[:, None] * accel  # (frames, N, 3) Newtons

    stiff = Stiffness(stretch=config.stretch, bend=config.bend, shear=config.shear)
    params = _sim_params(config.frame_dt)
    try:
        trajectory = simulate(mesh, rest, stiff, params, forces,
                              solver=SolverConfig(method="dense"))
    except SolverError as exc:
        raise SceneError(f"ground-truth simulation failed: {exc}") from exc

    n_total = trajectory.shape[0]
    rgbs = np.empty((n_total, config.height, config.width, 3))
    masks = np.empty((n_total, config.height, config.width))
    depths = np.empty((n_total, config.height, config.width))
    for n in range(n_total):
        out_n = rasterize(trajectory[n], mesh.triangles, mesh.uvs, texture,
                          camera, keep_record=False)
        rgbs[n], masks[n], depths[n] = out_n.rgb, out_n.mask, out_n.depth

    # Dynamic frame n uses seed METRIC_SAMPLE_SEED + n, the same stream the
    # evaluation side samples with, so a perfect reconstruction scores zero.
    clouds = np.stack([
        sample_surface(trajectory[n], mesh.triangles, config.cloud_points,
                       seed=METRIC_SAMPLE_SEED + n)
        for n in range(1, config.frames + 1)])

    # --- write everything ---
    out.mkdir(parents=True, exist_ok=True)
    frames_dir = out / "frames"
    gt_dir = out / "ground_truth"
    frames_dir.mkdir()
    gt_dir.mkdir()

    save_mesh(mesh, out / "mesh.txt")
    for n in range(n_total):
        save_image(frames_dir / f"rgb_{n:04d}.png", rgbs[n])
        save_image(frames_dir / f"mask_{n:04d}.png", masks[n])

    manifest = {
        "schema": SCHEMA_VERSION,
        "scene": {
            "n_frames": n_total,
            "frame_dt": config.frame_dt,
            "width": config.width,
            "height": config.height,
            "mesh_file": "mesh.txt",
        },
        "camera": {
            "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
            "width": camera.width, "height": camera.height, "near": camera.near,
            "rotation": camera.rotation.tolist(),
            "translation": camera.translation.tolist(),
        },
        "generator": {
            "seed": config.seed,
            "wind": config.wind,
            "rows": config.rows,
            "cols": config.cols,
            "spacing": config.spacing,
            "density": config.density,
            "pinning": config.pinning,
            "texture_size": config.texture_size,
            "cloud_points": config.cloud_points,
        },
    }
    write_toml(out / "scene.toml", manifest)

    np.save(gt_dir / "trajectory.npy", trajectory)
    np.save(gt_dir / "depths.npy", depths)
    np.save(gt_dir / "clouds.npy", clouds)
    np.save(gt_dir / "dynamic_accel.npy", accel)
    save_image(gt_dir / "texture.png", texture)
    np.save(gt_dir / "texture_float.npy", texture)
    write_toml(gt_dir / "params.toml", {
        "schema": SCHEMA_VERSION,
        "stiffness": {"stretch": config.stretch, "bend": config.bend,
                      "shear": config.shear},
        "forces": {"constant_accel": list(config.constant_accel),
                   "wind_amplitude": config.wind_amplitude,
                   "wind_jitter": config.wind_jitter},
    })
    return out


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _camera_from_manifest(cam: dict) -> Camera:
    try:
        return Camera(fx=float(cam["fx"]), fy=float(cam["fy"]),
                      cx=float(cam["cx"]), cy=float(cam["cy"]),
                      width=int(cam["width"]), height=int(cam["height"]),
                      rotation=np.array(cam["rotation"], dtype=float),
                      translation=np.array(cam["translation"], dtype=float),
                      near=float(cam.get("near", 1e-4)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"invalid camera table in manifest: {exc}") from exc


def load_scene(scene_dir: Path) -> Scene:
    """Load a scene directory; never touches ``ground_truth/``."""
    scene_dir = Path(scene_dir)
    manifest_path = scene_dir / "scene.toml"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no scene manifest at {manifest_path}")
    manifest = read_toml(manifest_path)
    if manifest.get("schema") != SCHEMA_VERSION:
        raise SceneError(f"unsupported scene schema {manifest.get('schema')!r}, "
                         f"expected {SCHEMA_VERSION}")
    try:
        sc = manifest["scene"]
        n_frames = int(sc["n_frames"])
        frame_dt = float(sc["frame_dt"])
        mesh_file = sc.get("mesh_file", "mesh.txt")
        camera = _camera_from_manifest(manifest["camera"])
    except KeyError as exc:
        raise SceneError(f"manifest missing required key {exc}") from exc

    mesh = load_mesh(scene_dir / mesh_file)
    if mesh.masses is None:
        raise SceneError("scene template must carry masses")

    rgbs, masks = [], []
    for n in range(n_frames):
        rgb_path = scene_dir / "frames" / f"rgb_{n:04d}.png"
        mask_path = scene_dir / "frames" / f"mask_{n:04d}.png"
        if not rgb_path.exists() or not mask_path.exists():
            raise FileNotFoundError(f"missing frame files for frame {n} in {scene_dir}")
        rgb = load_image(rgb_path)
        mask = load_image(mask_path)
        if rgb.shape != (camera.height, camera.width, 3) or mask.ndim != 2:
            raise SceneError(f"frame {n} resolution disagrees with the manifest")
        rgbs.append(rgb)
        masks.append(mask)

    scene = Scene(mesh=mesh, camera=camera,
                  target_rgb=np.stack(rgbs), target_mask=np.stack(masks),
                  frame_dt=frame_dt, metadata=manifest.get("generator", {}),
                  scene_dir=scene_dir)
    scene.validate()
    return scene


def load_ground_truth(scene_dir: Path) -> GroundTruth:
    """Load the evaluation-only data written by :func:`gen_scene`."""
    gt_dir = Path(scene_dir) / "ground_truth"
    if not gt_dir.exists():
        raise FileNotFoundError(f"no ground truth at {gt_dir}")
    params = read_toml(gt_dir / "params.toml")
    return GroundTruth(
        trajectory=np.load(gt_dir / "trajectory.npy"),
        depths=np.load(gt_dir / "depths.npy"),
        clouds=np.load(gt_dir / "clouds.npy"),
        dynamic_accel=np.load(gt_dir / "dynamic_accel.npy"),
        params=params,
        texture=np.load(gt_dir / "texture_float.npy"))
