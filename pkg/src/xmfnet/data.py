"""Synthetic shapes, viewpoint partialization, posed views, and the on-disk dataset.

Directory layout::

    root/manifest.csv                      sample_id,family,n_views
    root/<sample_id>/complete.pcf
    root/<sample_id>/partial_<v>.pcf
    root/<sample_id>/view_<v>.pgm
    root/<sample_id>/cam_<v>.json
    root/<sample_id>/silhouette_<v>.pgm

Every file read goes through an :class:`AccessAudit`, tagged with the
current phase (see :func:`access_phase`), so training code can be audited
for reads of ground-truth clouds.
"""

from __future__ import annotations

import contextlib
import contextvars
import csv
import hashlib
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, IngestionError, SchemaError
from .geometry import normalize_unit_sphere, read_pcf, resample, write_pcf
from .render import Camera, binarize, load_camera, read_pgm, render_silhouette, save_camera, write_pgm

FAMILIES = ("sphere", "box", "cylinder", "L-bracket", "lamp")


# -- shapes -------------------------------------------------------------------

@dataclass
class ShapeSpec:
    family: str
    params: Dict[str, float] = field(default_factory=dict)
    n_points: int = 2048

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown shape family {self.family!r}")
        if any(v <= 0 for v in self.params.values()):
            raise ConfigError(f"shape parameters must be positive: {self.params}")
        if self.n_points < 1:
            raise ConfigError("point budget must be positive")


def random_spec(family: str, rng: np.random.Generator, n_points: int) -> ShapeSpec:
    """Draw random (positive) parameters for a family."""
    u = rng.uniform
    if family == "sphere":
        params = {"radius": u(0.5, 1.0)}
    elif family == "box":
        params = {"ex": u(0.2, 1.0), "ey": u(0.2, 1.0), "ez": u(0.2, 1.0)}
    elif family == "cylinder":
        params = {"radius": u(0.2, 0.8), "height": u(0.4, 2.0)}
    elif family == "L-bracket":
        params = {"length": u(0.8, 1.6), "width": u(0.4, 1.0), "thickness": u(0.1, 0.3),
                  "arm": u(0.4, 1.4), "arm_pos": u(0.05, 0.95)}
    else:
        params = {"base": u(0.3, 0.7), "pole": u(0.6, 1.4), "shade": u(0.3, 0.8),
                  "shade_offset": u(0.05, 0.6)}
    return ShapeSpec(family, params, n_points)


def _box_surface(lo, hi, n, rng):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    axis = face % 3
    pts[np.arange(n), axis] = np.where(face < 3, lo[axis], hi[axis])
    return pts


def _cylinder_surface(center, radius, height, n, rng, axis=1):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, n)
    r = np.where(kind == 0, radius, radius * np.sqrt(rng.random(n)))
    h = np.where(kind == 0, rng.uniform(-height / 2, height / 2, n),
                 np.where(kind == 1, -height / 2, height / 2))
    local = np.c_[r * np.cos(theta), h, r * np.sin(theta)]
    local = np.roll(local, axis - 1, axis=1)
    return local + np.asarray(center, float)


def _in_box(p, lo, hi, tol=1e-12):
    return np.all((p > np.asarray(lo) + tol) & (p < np.asarray(hi) - tol), axis=1)


def _in_cylinder(p, center, radius, height):
    q = p - np.asarray(center)
    return (q[:, 0] ** 2 + q[:, 2] ** 2 < radius ** 2 * (1 - 1e-12)) & (np.abs(q[:, 1]) < height / 2 * (1 - 1e-12))


def _union_surface(parts, n, rng):
    """Uniform samples on the boundary of a union of solids (rejection of interior points)."""
    areas = np.array([a for a, _, _ in parts])
    out = []
    need = n
    while need > 0:
        draw = max(2 * need, 64)
        which = rng.choice(len(parts), size=draw, p=areas / areas.sum())
        for i, (_, sampler, _) in enumerate(parts):
            k = int(np.sum(which == i))
            if not k:
                continue
            pts = sampler(k)
            inside = np.zeros(k, dtype=bool)
            for j, (_, _, contains) in enumerate(parts):
                if j != i:
                    inside |= contains(pts)
            out.append(pts[~inside])
        need = n - sum(len(o) for o in out)
    pts = np.concatenate(out)
    return pts[rng.permutation(len(pts))[:n]]


def _box_part(lo, hi, rng):
    ext = np.asarray(hi, float) - np.asarray(lo, float)
    area = 2 * (ext[0] * ext[1] + ext[1] * ext[2] + ext[0] * ext[2])
    return area, (lambda k: _box_surface(lo, hi, k, rng)), (lambda p: _in_box(p, lo, hi))


def _cyl_part(center, radius, height, rng):
    area = 2 * np.pi * radius * height + 2 * np.pi * radius ** 2
    return (area, (lambda k: _cylinder_surface(center, radius, height, k, rng)),
            (lambda p: _in_cylinder(p, center, radius, height)))


def gen_shape(spec: ShapeSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform surface samples of the parametric shape, normalized to the unit sphere."""
    p, n = spec.params, spec.n_points
    if spec.family == "sphere":
        v = rng.normal(size=(n, 3))
        pts = p.get("radius", 1.0) * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif spec.family == "box":
        e = np.array([p.get("ex", 1.0), p.get("ey", 1.0), p.get("ez", 1.0)])
        pts = _box_surface(-e, e, n, rng)
    elif spec.family == "cylinder":
        pts = _cylinder_surface((0, 0, 0), p.get("radius", 0.5), p.get("height", 1.0), n, rng)
    elif spec.family == "L-bracket":
        length, width, t = p.get("length", 1.2), p.get("width", 0.6), p.get("thickness", 0.2)
        arm, pos = p.get("arm", 1.0), min(p.get("arm_pos", 0.9), 1.0)
        z0 = -length / 2 + pos * (length - t)
        parts = [_box_part((-width / 2, 0, -length / 2), (width / 2, t, length / 2), rng),
                 _box_part((-width / 2, t - 1e-9, z0), (width / 2, t + arm, z0 + t), rng)]
        pts = _union_surface(parts, n, rng)
    else:
        base, pole, shade = p.get("base", 0.5), p.get("pole", 1.0), p.get("shade", 0.5)
        off = p.get("shade_offset", 0.3)
        parts = [_cyl_part((0, 0.05, 0), base, 0.1, rng),
                 _cyl_part((0, 0.1 + pole / 2, 0), 0.05, pole, rng),
                 _cyl_part((0, 0.1 + pole, off), shade, 0.5 * shade, rng)]
        pts = _union_surface(parts, n, rng)
    pts, _, _ = normalize_unit_sphere(pts)
    return pts


# -- partialization and views -------------------------------------------------

def view_direction(cam: Camera) -> np.ndarray:
    c = cam.center
    return c / np.linalg.norm(c)


def facing_subset(Y, view_dir, max_angle_deg: float = 90.0) -> np.ndarray:
    """Indices of points whose offset from the centroid lies within the angle of ``view_dir``."""
    Y = np.asarray(Y, dtype=np.float64)
    d = np.asarray(view_dir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    rel = Y - Y.mean(axis=0)
    norms = np.linalg.norm(rel, axis=1)
    cos = rel @ d / np.where(norms > 0, norms, 1.0)
    return np.flatnonzero(cos >= np.cos(np.radians(max_angle_deg)))


def partialize_view(Y, view_dir, rng: np.random.Generator, n: Optional[int] = None,
                    max_angle_deg: float = 90.0, angle_jitter_deg: float = 5.0) -> np.ndarray:
    """Keep the points facing ``view_dir`` (angular cut about the centroid), then resample to ``n``."""
    Y = np.asarray(Y, dtype=np.float64)
    n = Y.shape[0] if n is None else n
    angle = max_angle_deg + rng.uniform(-angle_jitter_deg, angle_jitter_deg)
    keep = facing_subset(Y, view_dir, angle)
    if keep.size == 0:
        keep = np.array([int(np.argmax(Y @ np.asarray(view_dir)))])
    return resample(Y[keep], n, rng)


@dataclass
class ViewConfig:
    H: int = 224
    W: int = 224
    focal: float = 210.0
    distance: float = 2.5
    elevations: Sequence[float] = (15.0, 30.0)
    image_rho: float = 0.0125
    dense_factor: int = 8
    partial_azimuth_offset: float = 90.0

    def camera(self, v: int, n_views: int) -> Camera:
        az = 360.0 * v / n_views
        el = self.elevations[v % len(self.elevations)]
        return Camera.on_sphere(az, el, self.distance, self.H, self.W, self.focal)

    def partial_direction(self, v: int, n_views: int) -> np.ndarray:
        az = np.radians(360.0 * v / n_views + self.partial_azimuth_offset)
        el = np.radians(self.elevations[v % len(self.elevations)])
        return np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])


def render_views(Y, n_views: int, cfg: Optional[ViewConfig] = None):
    """Posed silhouette views of a (dense) normalized cloud on a camera ring.

    Returns a list of ``(image H×W×3, camera, binary silhouette)``.
    """
    cfg = cfg or ViewConfig()
    out = []
    for v in range(n_views):
        cam = cfg.camera(v, n_views)
        soft = render_silhouette(Y, cam, cfg.image_rho).data
        image = np.repeat(np.round(soft * 255.0)[..., None] / 255.0, 3, axis=2)
        out.append((image, cam, binarize(image)))
    return out


def toy_view_config(**overrides) -> ViewConfig:
    """64×64 views with splats large enough for 512-point clouds."""
    base = dict(H=64, W=64, focal=40.0, image_rho=0.12)
    base.update(overrides)
    return ViewConfig(**base)


# -- samples & dataset --------------------------------------------------------

@dataclass
class Sample:
    id: str
    partial: np.ndarray
    image: np.ndarray
    camera: Camera
    complete: Optional[np.ndarray] = None
    silhouette: Optional[np.ndarray] = None
    family: str = ""
    view: int = 0


class AccessAudit:
    """Thread-safe record of (phase, path) for every dataset file read."""

    def __init__(self):
        self._lock = threading.Lock()
        self.records: List[tuple] = []

    def record(self, path) -> None:
        with self._lock:
            self.records.append((_PHASE.get(), str(path)))

    def reads(self, phase: Optional[str] = None, name: Optional[str] = None) -> List[str]:
        return [p for ph, p in self.records
                if (phase is None or ph == phase) and (name is None or Path(p).name == name)]

    def clear(self) -> None:
        with self._lock:
            self.records.clear()


_PHASE: contextvars.ContextVar = contextvars.ContextVar("xmf_access_phase", default="other")


@contextlib.contextmanager
def access_phase(phase: str):
    token = _PHASE.set(phase)
    try:
        yield
    finally:
        _PHASE.reset(token)


class LazySample:
    """A sample whose fields are read from disk on first access."""

    def __init__(self, root: Path, sample_id: str, view: int, family: str, audit: AccessAudit,
                 n_points: Optional[int] = None):
        self.root = root
        self.sample_id = sample_id
        self.view = view
        self.family = family
        self.id = f"{sample_id}/{view}"
        self._audit = audit
        self._n_points = n_points
        self._cache: dict = {}

    def _path(self, name: str) -> Path:
        return self.root / self.sample_id / name

    def _cloud(self, name: str) -> np.ndarray:
        path = self._path(name)
        self._audit.record(path)
        pts = read_pcf(path)
        if self._n_points is not None and pts.shape[0] != self._n_points:
            raise SchemaError(f"{path}: expected {self._n_points} points, found {pts.shape[0]}")
        return pts

    def _get(self, key, loader):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    @property
    def partial(self) -> np.ndarray:
        return self._get("partial", lambda: self._cloud(f"partial_{self.view}.pcf"))

    @property
    def complete(self) -> np.ndarray:
        # never cached: every ground-truth read shows up in the audit
        return self._cloud("complete.pcf")

    @property
    def image(self) -> np.ndarray:
        def load():
            path = self._path(f"view_{self.view}.pgm")
            self._audit.record(path)
            return np.repeat(read_pgm(path)[..., None], 3, axis=2)
        return self._get("image", load)

    @property
    def silhouette(self) -> np.ndarray:
        def load():
            path = self._path(f"silhouette_{self.view}.pgm")
            self._audit.record(path)
            return read_pgm(path)
        return self._get("silhouette", load)

    @property
    def camera(self) -> Camera:
        def load():
            path = self._path(f"cam_{self.view}.json")
            self._audit.record(path)
            return load_camera(path)
        return self._get("camera", load)

    def materialize(self, with_complete: bool = False) -> Sample:
        return Sample(self.id, self.partial, self.image, self.camera,
                      self.complete if with_complete else None, self.silhouette, self.family, self.view)


def split_of(sample_id: str, train_fraction: float = 0.8) -> str:
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    bucket = int.from_bytes(digest[:8], "little") / 2 ** 64
    return "train" if bucket < train_fraction else "test"


def write_object(root, sample_id: str, complete, partials, views) -> None:
    """Write one object's directory: complete cloud plus per-view partial/image/camera/silhouette."""
    d = Path(root) / sample_id
    d.mkdir(parents=True, exist_ok=True)
    write_pcf(d / "complete.pcf", complete)
    for v, (partial, (image, cam, sil)) in enumerate(zip(partials, views)):
        write_pcf(d / f"partial_{v}.pcf", partial)
        write_pgm(d / f"view_{v}.pgm", image)
        save_camera(d / f"cam_{v}.json", cam)
        write_pgm(d / f"silhouette_{v}.pgm", sil)


def write_manifest(root, rows) -> None:
    with (Path(root) / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "family", "n_views"])
        for row in rows:
            w.writerow(row)


def read_manifest(root) -> List[tuple]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        return []
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return [(r["sample_id"], r["family"], int(r["n_views"])) for r in rows]
    except (KeyError, ValueError, csv.Error) as exc:
        raise IngestionError(path, f"bad manifest ({exc})") from None


def _discover(root: Path) -> List[tuple]:
    rows = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        n_views = len(list(d.glob("partial_*.pcf")))
        rows.append((d.name, "", n_views))
    return rows


def load_dataset(root, split: str = "all", n_points: Optional[int] = None,
                 audit: Optional[AccessAudit] = None, train_fraction: float = 0.8) -> List[LazySample]:
    """Lazy per-view samples of a dataset directory.

    ``split`` is ``"train"``, ``"test"`` or ``"all"``; membership is a hash of
    the object id, so every view of an object lands in the same split.
    """
    root = Path(root)
    if split not in ("train", "test", "all"):
        raise ConfigError(f"unknown split {split!r}")
    if not root.is_dir():
        raise IngestionError(root, "dataset root does not exist")
    audit = audit or AccessAudit()
    rows = read_manifest(root) or _discover(root)
    out = []
    for sample_id, family, n_views in rows:
        if split != "all" and split_of(sample_id, train_fraction) != split:
            continue
        names = ["complete.pcf"] + [f"{kind}_{v}.{ext}" for v in range(n_views)
                                    for kind, ext in (("partial", "pcf"), ("view", "pgm"), ("cam", "json"))]
        for name in names:
            if not (root / sample_id / name).is_file():
                raise IngestionError(root / sample_id / name, "missing file")
        out.extend(LazySample(root, sample_id, v, family, audit, n_points) for v in range(n_views))
    return out


# -- synthetic generation -----------------------------------------------------

@dataclass
class SyntheticObject:
    id: str
    family: str
    complete: np.ndarray
    dense: np.ndarray
    partials: List[np.ndarray]
    views: list

    def samples(self) -> List[Sample]:
        return [Sample(f"{self.id}/{v}", p, img, cam, self.complete, sil, self.family, v)
                for v, (p, (img, cam, sil)) in enumerate(zip(self.partials, self.views))]


def _f32(a: np.ndarray) -> np.ndarray:
    # stored clouds are f32 on disk; quantize up front so round trips are exact
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def make_object(sample_id: str, family: str, n_points: int, n_views: int, rng: np.random.Generator,
                view_cfg: Optional[ViewConfig] = None) -> SyntheticObject:
    view_cfg = view_cfg or ViewConfig()
    spec = random_spec(family, rng, n_points * view_cfg.dense_factor)
    dense = gen_shape(spec, rng)
    complete = _f32(dense[: n_points])
    views = render_views(dense, n_views, view_cfg)
    partials = [_f32(partialize_view(complete, view_cfg.partial_direction(v, n_views), rng, n_points))
                for v in range(n_views)]
    return SyntheticObject(sample_id, family, complete, dense, partials, views)


def generate_objects(n_shapes: int, n_views: int, n_points: int, seed: int,
                     families: Sequence[str] = FAMILIES, view_cfg: Optional[ViewConfig] = None
                     ) -> List[SyntheticObject]:
    """Deterministic per-object seeds so objects can be generated independently."""
    objs = []
    for i in range(n_shapes):
        rng = np.random.default_rng([seed, i])
        family = families[i % len(families)]
        objs.append(make_object(f"shape_{i:04d}", family, n_points, n_views, rng, view_cfg))
    return objs


def write_dataset(root, objects: Sequence[SyntheticObject]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for obj in objects:
        write_object(root, obj.id, obj.complete, obj.partials, obj.views)
    write_manifest(root, [(o.id, o.family, len(o.partials)) for o in objects])
