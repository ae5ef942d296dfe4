"""Synthetic posed scenes with known geometry, classes and feature fields.

Objects are blobs of Gaussians placed on a circle and viewed by a ring of
cameras. Each object is its own class and instance. Images are color
renders, feature maps are renders of per-class one-hot prototypes plus
bounded uniform noise, and labels are the argmax of a one-hot identity
render (void where the background wins).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .core import Camera, GaussianSet, logit
from .raster import DEFAULT_SETTINGS, RasterSettings, render

CLASS_COLORS = np.array([
    [0.90, 0.20, 0.15], [0.15, 0.70, 0.25], [0.20, 0.35, 0.90], [0.95, 0.80, 0.10],
    [0.70, 0.20, 0.80], [0.10, 0.80, 0.80], [0.95, 0.55, 0.20], [0.55, 0.55, 0.55],
])


@dataclass
class SyntheticScene:
    gaussians: GaussianSet
    classes: np.ndarray
    cameras: list[Camera]
    images: list[np.ndarray]
    feature_stacks: list[dict]
    labels: list[np.ndarray]
    instances: list[np.ndarray]
    prototypes: dict
    init_points: np.ndarray
    init_colors: np.ndarray
    train_views: list[int]
    test_views: list[int]
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(self.meta["num_classes"])


def ring_cameras(n_views: int, radius: float = 4.0, elevation_deg: float = 45.0,
                 fov_deg: float = 55.0, size: int = 64) -> list[Camera]:
    cams = []
    el = np.radians(elevation_deg)
    for v in range(n_views):
        az = 2 * np.pi * v / n_views
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, np.zeros(3), fov_deg=fov_deg, width=size, height=size))
    return cams


def class_color(c: int) -> np.ndarray:
    return CLASS_COLORS[c % len(CLASS_COLORS)]


def label_render(gs: GaussianSet, cam: Camera, values: np.ndarray,
                 settings: RasterSettings = DEFAULT_SETTINGS) -> np.ndarray:
    """Argmax of a one-hot render with a void channel; void pixels become -1."""
    k = values.shape[1]
    bg = np.zeros(k + 1)
    bg[-1] = 1.0
    pay = np.concatenate([values, np.zeros((len(values), 1))], axis=1)
    img = render(cam, gs, pay, background=bg, settings=settings, record=False).image
    lab = np.argmax(img, axis=-1)
    return np.where(lab == k, -1, lab)


def generate(n_objects: int = 5, gaussians_per_object: int = 20, n_views: int = 12,
             seed: int = 0, feature_noise: float = 0.0, *, image_size: int = 64,
             feature_size: int = 32, feature_dim: int = 16, scales=(1, 2, 3, 4),
             object_radius: float = 1.0, spread: float = 0.12, init_jitter: float = 0.02,
             settings: RasterSettings = DEFAULT_SETTINGS) -> SyntheticScene:
    """Build a seeded synthetic scene in memory; see :func:`write_scene`."""
    if n_objects < 2:
        raise ValueError("need at least 2 objects")
    if n_objects > feature_dim:
        raise ValueError(f"{n_objects} one-hot prototypes do not fit in {feature_dim} dims")
    rng = np.random.default_rng(seed)
    n = n_objects * gaussians_per_object
    classes = np.repeat(np.arange(n_objects), gaussians_per_object)

    ang = 2 * np.pi * np.arange(n_objects) / n_objects
    centers = object_radius * np.stack([np.cos(ang), np.sin(ang), np.zeros(n_objects)], axis=1)
    positions = centers[classes] + rng.normal(0.0, spread, size=(n, 3))
    rots = rng.normal(size=(n, 4))
    rots /= np.linalg.norm(rots, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.05, 0.09, size=(n, 3)))
    opacity_raw = np.full(n, logit(0.9))
    colors = np.clip(np.stack([class_color(c) for c in classes])
                     + rng.uniform(-0.08, 0.08, size=(n, 3)), 0.0, 1.0)

    prototypes = {}
    for s in scales:
        perm = rng.permutation(feature_dim)[:n_objects]
        prototypes[s] = np.eye(feature_dim)[perm]
    onehot = np.eye(n_objects)[classes]
    gs = GaussianSet(positions, rots, log_scales, opacity_raw, colors, onehot,
                     {s: prototypes[s][classes] for s in scales},
                     {"class": classes.astype(np.float64)})

    cams = ring_cameras(n_views, size=image_size)
    images, stacks, labels = [], [], []
    for cam in cams:
        images.append(np.clip(render(cam, gs, "color", settings=settings, record=False).image,
                               0.0, 1.0))
        labels.append(label_render(gs, cam, onehot, settings))
        fcam = cam.resized(feature_size, feature_size)
        stack = {}
        for s in scales:
            F = render(fcam, gs, ("feature", s), settings=settings, record=False).image
            if feature_noise > 0:
                F = F + rng.uniform(-feature_noise, feature_noise, size=F.shape)
            stack[s] = F
        stacks.append(stack)

    init_points = positions + rng.normal(0.0, init_jitter, size=(n, 3))
    init_colors = np.clip(colors + rng.normal(0.0, 0.05, size=(n, 3)), 0.0, 1.0)
    test = [v for v in range(n_views) if v % 4 == 3]
    train = [v for v in range(n_views) if v % 4 != 3]
    meta = dict(seed=seed, n_objects=n_objects, gaussians_per_object=gaussians_per_object,
                n_views=n_views, num_classes=n_objects, feature_noise=feature_noise,
                image_size=image_size, feature_size=feature_size, feature_dim=feature_dim,
                scales=list(scales), train_views=train, test_views=test)
    return SyntheticScene(gs, classes, cams, images, stacks, labels,
                          [lab.copy() for lab in labels], prototypes, init_points, init_colors,
                          train, test, meta)


# ---------------------------------------------------------------- disk layout

def view_name(v: int) -> str:
    return f"{v:04d}"


def fmap_path(root, v: int, s: int) -> Path:
    return Path(root) / "features" / f"{view_name(v)}_s{s}.fmap"


def write_scene(scene: SyntheticScene, out, raw_labels: list[np.ndarray] | None = None,
                manifest: list | None = None) -> None:
    """Write every CLI-consumable artifact; identical scenes give identical bytes.

    Layout: ``scene.json``, ``cameras.json``, ``points3d.ply`` (initial point
    cloud), ``gt_gaussians.ply``, ``images/``, ``labels/`` (clean),
    ``instances/``, ``raw_labels/`` (possibly noisy), ``features/`` (FMAP per
    view and scale) and ``noise_manifest.json``.
    """
    out = Path(out)
    io.write_json(out / "scene.json", scene.meta)
    io.save_cameras(out / "cameras.json", scene.cameras)
    io.save_point_cloud(out / "points3d.ply", scene.init_points, scene.init_colors)
    io.save_gaussians(out / "gt_gaussians.ply", scene.gaussians)
    raw = scene.labels if raw_labels is None else raw_labels
    for v in range(len(scene.cameras)):
        name = view_name(v)
        io.save_png(out / "images" / f"{name}.png", scene.images[v])
        io.save_label_png(out / "labels" / f"{name}.png", scene.labels[v])
        io.save_label_png(out / "instances" / f"{name}.png", scene.instances[v])
        io.save_label_png(out / "raw_labels" / f"{name}.png", raw[v])
        for s, F in sorted(scene.feature_stacks[v].items()):
            io.save_fmap(fmap_path(out, v, s), F)
    entries = [dict(view=v, instance=i, old=o, new=nw) for v, i, o, nw in (manifest or [])]
    io.write_json(out / "noise_manifest.json", entries)


def load_scene(root) -> SyntheticScene:
    """Read a scene directory back; images come back 8-bit quantized."""
    root = Path(root)
    meta = io.read_json(root / "scene.json")
    cams = io.load_cameras(root / "cameras.json")
    gs = io.load_gaussians(root / "gt_gaussians.ply")
    pts, cols = io.load_point_cloud(root / "points3d.ply")
    views = range(len(cams))
    images = [io.load_png(root / "images" / f"{view_name(v)}.png") for v in views]
    labels = [io.load_label_png(root / "labels" / f"{view_name(v)}.png") for v in views]
    inst = [io.load_label_png(root / "instances" / f"{view_name(v)}.png") for v in views]
    stacks = [{s: io.load_fmap(fmap_path(root, v, s)) for s in meta["scales"]} for v in views]
    classes = gs.extras["class"].astype(np.int64)
    protos = {s: np.stack([gs.features[s][classes == c][0] for c in range(meta["num_classes"])])
              for s in meta["scales"]}
    return SyntheticScene(gs, classes, cams, images, stacks, labels, inst, protos, pts, cols,
                          meta["train_views"], meta["test_views"], meta)


def load_raw_labels(root, n_views: int) -> list[np.ndarray]:
    return [io.load_label_png(Path(root) / "raw_labels" / f"{view_name(v)}.png")
            for v in range(n_views)]


def visibility_fraction(gs: GaussianSet, cam: Camera,
                        settings: RasterSettings = DEFAULT_SETTINGS) -> float:
    """Share of Gaussians whose splat lands on the image."""
    from .raster import project

    return len(project(cam, gs, settings)) / max(len(gs), 1)
