"""Synthetic abdominal CT phantoms: a liver ellipsoid with small drifting lesions.

Geometry is defined in mm. Both the liver and each lesion may drift in-plane
linearly with z, so consecutive slices show genuine in-plane motion. Intensities
are in HU; boundaries are anti-aliased by 3x3x3 supersampling and labels come
from the noiseless geometry at voxel centres.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import ConfigError, floats, format_kv, ints, parse_kv
from .volume import LESION, LIVER, SegVolume, Volume, VolumeError

LIVER_HU = 120.0
SUPERSAMPLE = 3


class PhantomSpecError(ValueError):
    pass


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]  # mm, (z, y, x)
    radii: tuple[float, float, float]
    drift: tuple[float, float] = (0.0, 0.0)  # in-plane (y, x) shift per mm of z


@dataclass
class Lesion:
    center: tuple[float, float, float]  # mm, (z, y, x) at z = center[0]
    radius: float
    drift: tuple[float, float] = (0.0, 0.0)
    contrast: float = -70.0  # HU offset from liver parenchyma


@dataclass
class PhantomSpec:
    grid: tuple[int, int, int] = (31, 64, 64)
    spacing_thin: tuple[float, float, float] = (2.5, 1.0, 1.0)
    liver: Ellipsoid = field(default_factory=lambda: Ellipsoid((38.75, 32.0, 32.0), (32.0, 22.0, 25.0)))
    lesions: list[Lesion] = field(default_factory=list)
    noise_sigma: float = 8.0
    seed: int = 0

    def validate(self) -> None:
        z, y, x = self.grid
        if min(self.grid) < 1 or y % 8 or x % 8:
            raise PhantomSpecError(f"grid {self.grid}: all dims positive and Y, X multiples of 8")
        if not all(s > 0 for s in self.spacing_thin):
            raise PhantomSpecError("spacing must be positive")
        if not all(r > 0 for r in self.liver.radii):
            raise PhantomSpecError("liver radii must be positive")
        if self.noise_sigma < 0:
            raise PhantomSpecError("noise_sigma must be non-negative")
        for i, les in enumerate(self.lesions):
            if not 2.0 <= les.radius <= 15.0:
                raise PhantomSpecError(f"lesion {i}: radius {les.radius} mm outside [2, 15]")
            if not lesion_inside_liver(les, self.liver):
                raise PhantomSpecError(f"lesion {i} escapes the liver")


def _sheared_offset(z_mm, ref_z: float, drift) -> tuple:
    dz = z_mm - ref_z
    return drift[0] * dz, drift[1] * dz


def _liver_level(liver: Ellipsoid, z, y, x):
    oy, ox = _sheared_offset(z, liver.center[0], liver.drift)
    cz, cy, cx = liver.center
    rz, ry, rx = liver.radii
    return ((z - cz) / rz) ** 2 + ((y - cy - oy) / ry) ** 2 + ((x - cx - ox) / rx) ** 2


def _lesion_level(les: Lesion, z, y, x):
    oy, ox = _sheared_offset(z, les.center[0], les.drift)
    cz, cy, cx = les.center
    return ((z - cz) ** 2 + (y - cy - oy) ** 2 + (x - cx - ox) ** 2) / les.radius**2


def lesion_inside_liver(les: Lesion, liver: Ellipsoid, n_dirs: int = 2000) -> bool:
    """Check containment on a Fibonacci sampling of the (sheared) lesion surface."""
    k = np.arange(n_dirs) + 0.5
    phi = np.arccos(1 - 2 * k / n_dirs)
    theta = np.pi * (1 + 5**0.5) * k
    dz = les.radius * np.cos(phi)
    dy = les.radius * np.sin(phi) * np.sin(theta)
    dx = les.radius * np.sin(phi) * np.cos(theta)
    z = les.center[0] + dz
    y = les.center[1] + dy + les.drift[0] * dz
    x = les.center[2] + dx + les.drift[1] * dz
    return bool(np.all(_liver_level(liver, z, y, x) < 1.0))


def _background(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth soft-tissue gradient (HU) over the in-plane grid, constant in z."""
    _, ny, nx = spec.grid
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    gy, gx = rng.uniform(-30, 30, 2)
    return 10.0 + gy * (yy / ny - 0.5) + gx * (xx / nx - 0.5)


def generate(spec: PhantomSpec) -> tuple[Volume, SegVolume]:
    """Render the phantom volume (HU) and its label map."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    nz, ny, nx = spec.grid
    dz, dy, dx = spec.spacing_thin
    offsets = (np.arange(SUPERSAMPLE) - (SUPERSAMPLE - 1) / 2) / SUPERSAMPLE
    sub_z = offsets[:, None, None, None] * dz
    sub_y = offsets[None, :, None, None] * dy
    sub_x = offsets[None, None, :, None] * dx
    yy, xx = np.mgrid[0:ny, 0:nx]
    y_mm = (yy * dy).reshape(1, 1, 1, -1)
    x_mm = (xx * dx).reshape(1, 1, 1, -1)
    bg = _background(spec, rng)
    image = np.empty((nz, ny, nx), np.float64)
    labels = np.zeros((nz, ny, nx), np.uint8)
    for k in range(nz):
        z_mm = k * dz
        zs, ys, xs = z_mm + sub_z, y_mm + sub_y, x_mm + sub_x
        liver_frac = (_liver_level(spec.liver, zs, ys, xs) <= 1.0).mean(axis=(0, 1, 2)).reshape(ny, nx)
        value = bg * (1 - liver_frac) + LIVER_HU * liver_frac
        lab = np.where(_liver_level(spec.liver, z_mm, yy * dy, xx * dx) <= 1.0, LIVER, 0)
        for les in spec.lesions:
            frac = (_lesion_level(les, zs, ys, xs) <= 1.0).mean(axis=(0, 1, 2)).reshape(ny, nx)
            value += les.contrast * frac
            lab = np.where(_lesion_level(les, z_mm, yy * dy, xx * dx) <= 1.0, LESION, lab)
        image[k] = value
        labels[k] = lab
    if spec.noise_sigma > 0:
        image += rng.normal(0.0, spec.noise_sigma, image.shape)
    return Volume(image.astype(np.float32), spec.spacing_thin), SegVolume(labels, spec.spacing_thin)


def random_spec(seed: int, grid=(31, 64, 64), spacing=(2.5, 1.0, 1.0), n_lesions=(2, 4),
                lesion_radius=(2.5, 7.0), noise_sigma: float = 8.0, max_tries: int = 200) -> PhantomSpec:
    """Draw a liver and a set of contained, drifting lesions from ``seed``."""
    rng = np.random.default_rng([seed, 7919])
    nz, ny, nx = grid
    ext = np.array(grid) * np.array(spacing)
    liver = Ellipsoid(
        center=tuple(ext / 2 + rng.uniform(-0.05, 0.05, 3) * ext),
        radii=(ext[0] * rng.uniform(0.36, 0.44), ext[1] * rng.uniform(0.30, 0.38), ext[2] * rng.uniform(0.34, 0.42)),
        # coherent in-plane motion of 0.75-1.5 px per thin slice along each axis
        drift=tuple(rng.choice([-1.0, 1.0], 2) * rng.uniform(0.3, 0.6, 2)),
    )
    count = int(rng.integers(n_lesions[0], n_lesions[1] + 1))
    lesions: list[Lesion] = []
    tries = 0
    while len(lesions) < count:
        tries += 1
        if tries > max_tries:
            raise PhantomSpecError(f"could not place {count} lesions inside the liver (seed {seed})")
        r = float(rng.uniform(*lesion_radius))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        frac = rng.uniform(0, 0.7)
        z_off = direction[0] * liver.radii[0] * frac
        center = (
            liver.center[0] + z_off,
            liver.center[1] + direction[1] * liver.radii[1] * frac + liver.drift[0] * z_off,
            liver.center[2] + direction[2] * liver.radii[2] * frac + liver.drift[1] * z_off,
        )
        les = Lesion(center, r, tuple(np.add(liver.drift, rng.uniform(-0.1, 0.1, 2))), float(rng.uniform(-90, -50)))
        if not lesion_inside_liver(les, liver):
            continue
        if any(_lesion_level(other, *center) < ((r + other.radius + 2) / other.radius) ** 2 for other in lesions):
            continue
        lesions.append(les)
    return PhantomSpec(tuple(grid), tuple(spacing), liver, lesions, noise_sigma, seed)


def degrade_thickness(volume: Volume, seg: SegVolume | None, factor: int):
    """Keep every ``factor``-th slice; slice spacing grows by ``factor``.

    Requires Z = 1 (mod factor) so the first and last slices survive.
    """
    if factor < 1:
        raise VolumeError(f"factor must be positive, got {factor}")
    nz = volume.shape[0]
    if (nz - 1) % factor:
        raise VolumeError(f"{nz} slices cannot be thinned by {factor}: need Z = 1 (mod {factor})")
    dz, dy, dx = volume.spacing
    spacing = (dz * factor, dy, dx)
    thick = volume.with_data(volume.data[::factor].copy(), spacing=spacing)
    thick_seg = SegVolume(seg.labels[::factor].copy(), spacing) if seg is not None else None
    return thick, thick_seg


# --------------------------------------------------------------------------
# key = value spec files


def spec_from_kv(values: dict[str, str], seed_offset: int = 0) -> PhantomSpec:
    """Build a spec; without explicit ``lesions`` a random layout is drawn per seed.

    Recognised keys: grid, spacing, noise_sigma, seed, n_lesions, lesion_radius,
    liver_center, liver_radii, liver_drift, lesions (``z y x r vy vx contrast``
    records separated by ';').
    """
    known = {"grid", "spacing", "noise_sigma", "seed", "n_lesions", "lesion_radius",
             "liver_center", "liver_radii", "liver_drift", "lesions"}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
    try:
        seed = int(values.get("seed", 0)) + seed_offset
        grid = ints(values.get("grid", "31,64,64"))
        spacing = floats(values.get("spacing", "2.5,1,1"))
        sigma = float(values.get("noise_sigma", 8.0))
        n_les = ints(values.get("n_lesions", "2,4"))
        radius = floats(values.get("lesion_radius", "2.5,7"))
        if len(n_les) == 1:
            n_les = (n_les[0], n_les[0])
        spec = random_spec(seed, grid, spacing, n_les, radius, sigma)
        if "liver_center" in values or "liver_radii" in values or "liver_drift" in values:
            spec.liver = Ellipsoid(
                floats(values.get("liver_center", ",".join(map(str, spec.liver.center)))),
                floats(values.get("liver_radii", ",".join(map(str, spec.liver.radii)))),
                floats(values.get("liver_drift", "0,0")),
            )
        if "lesions" in values:
            lesions = []
            for rec in filter(None, (r.strip() for r in values["lesions"].split(";"))):
                z, y, x, r, vy, vx, c = floats(rec)
                lesions.append(Lesion((z, y, x), r, (vy, vx), c))
            spec.lesions = lesions
    except (TypeError, ValueError) as exc:
        if isinstance(exc, (ConfigError, PhantomSpecError)):
            raise
        raise ConfigError(f"invalid phantom spec: {exc}") from None
    spec.validate()
    return spec


def spec_to_kv(spec: PhantomSpec) -> str:
    lesions = "; ".join(
        " ".join(repr(float(v)) for v in (*l.center, l.radius, *l.drift, l.contrast)) for l in spec.lesions
    )
    return format_kv({
        "grid": spec.grid,
        "spacing": spec.spacing_thin,
        "noise_sigma": spec.noise_sigma,
        "seed": spec.seed,
        "liver_center": tuple(repr(float(v)) for v in spec.liver.center),
        "liver_radii": tuple(repr(float(v)) for v in spec.liver.radii),
        "liver_drift": tuple(repr(float(v)) for v in spec.liver.drift),
        "lesions": lesions,
    })


def load_spec(text: str, seed_offset: int = 0) -> PhantomSpec:
    return spec_from_kv(parse_kv(text), seed_offset)


def with_seed(spec: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(spec, seed=seed)
