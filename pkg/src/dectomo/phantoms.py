"""Procedural ground-truth phantoms, threshold segmentation, and datasets.

Phantoms carry either a two-channel material density map directly or a
scalar CT-like intensity image to be split into bone and water channels
by :func:`threshold_segment`.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .arrayio import read_array, sha256_file, write_array, write_index
from .geometry import FanBeamGeometry, kvp_switching_angles, forward_project
from .spectral import simulate_kvp_switched

BONE_CHANNEL, WATER_CHANNEL = 0, 1


@dataclass
class Phantom:
    name: str
    material: np.ndarray = None       # (n, n, 2) densities, mg/cm^3
    attenuation_image: np.ndarray = None  # scalar CT surrogate
    provenance: str = "procedural"

    def __post_init__(self):
        for arr in (self.material, self.attenuation_image):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("phantom arrays must be finite")


def threshold_segment(img, t_low, t_high, bone_density_map=1.0,
                      water_density_map=1.0):
    """Split a scalar image into (bone, water) channels by soft thresholds.

    Pixels above ``t_high`` are all bone, below ``t_low`` all water, and the
    band between mixes linearly, so the two weights always sum to one.
    Density maps are either scalars multiplying the input intensity or
    callables mapping intensity to density. Output is clamped at zero.
    """
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("input image must be finite")
    if t_low > t_high:
        raise ValueError("need t_low <= t_high")
    if t_high == t_low:
        w_bone = (img > t_high).astype(np.float64)
    else:
        w_bone = np.clip((img - t_low) / (t_high - t_low), 0.0, 1.0)
    bone_int = bone_density_map(img) if callable(bone_density_map) \
        else img * bone_density_map
    water_int = water_density_map(img) if callable(water_density_map) \
        else img * water_density_map
    out = np.stack([w_bone * bone_int, (1.0 - w_bone) * water_int], axis=-1)
    return np.maximum(out, 0.0)


def _ellipse_mask(n, cx, cy, ax, ay, angle_deg=0.0):
    ii = (np.arange(n) - (n - 1) / 2) / n
    x, y = np.meshgrid(ii, ii, indexing="ij")
    th = np.deg2rad(angle_deg)
    xr = (x - cx) * np.cos(th) + (y - cy) * np.sin(th)
    yr = -(x - cx) * np.sin(th) + (y - cy) * np.cos(th)
    return (xr / ax) ** 2 + (yr / ay) ** 2 <= 1.0


def make_phantom(kind, params=None, seed=0):
    """Deterministic procedural phantom of the given kind.

    Kinds: ``disk_set`` (explicit or random disks), ``ellipse_torso``
    (water body with 1..4 bone-density elliptical inserts), and
    ``resolution_bars`` (bone bar groups of shrinking width in water).
    """
    params = dict(params or {})
    n = int(params.pop("image_size", 128))
    rng = np.random.default_rng(seed)
    mat = np.zeros((n, n, 2))

    if kind == "disk_set":
        disks = params.pop("disks", None)
        if disks is None:
            count = int(params.pop("n_disks", 0))
            disks = []
            for _ in range(count):
                disks.append((rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25),
                              rng.uniform(0.05, 0.15),
                              rng.uniform(400, 1800),
                              int(rng.integers(0, 2))))
        for cx, cy, r, dens, chan in disks:
            mat[_ellipse_mask(n, cx, cy, r, r), int(chan)] = dens

    elif kind == "ellipse_torso":
        water_density = params.pop("water_density", 1000.0)
        bone_range = params.pop("bone_density_range", (800.0, 2000.0))
        body_ax = rng.uniform(0.32, 0.42)
        body_ay = rng.uniform(0.24, 0.32)
        body = _ellipse_mask(n, 0.0, 0.0, body_ax, body_ay)
        mat[body, WATER_CHANNEL] = water_density
        n_ins = int(rng.integers(1, 5))
        for _ in range(n_ins):
            ax = rng.uniform(0.03, 0.09)
            ay = rng.uniform(0.03, 0.09)
            cx = rng.uniform(-0.7, 0.7) * (body_ax - ax)
            cy = rng.uniform(-0.7, 0.7) * (body_ay - ay)
            dens = rng.uniform(*bone_range)
            ins = _ellipse_mask(n, cx, cy, ax, ay, rng.uniform(0, 180))
            mat[ins, BONE_CHANNEL] = dens
            mat[ins, WATER_CHANNEL] = 0.0

    elif kind == "resolution_bars":
        water_density = params.pop("water_density", 1000.0)
        bone_density = params.pop("bone_density", 1500.0)
        body = _ellipse_mask(n, 0.0, 0.0, 0.4, 0.4)
        mat[body, WATER_CHANNEL] = water_density
        x0 = n // 4
        for width in (8, 6, 4, 3, 2):
            for k in range(3):
                lo = x0 + 2 * k * width
                mat[lo:lo + width, n // 3:2 * n // 3, BONE_CHANNEL] = bone_density
                mat[lo:lo + width, n // 3:2 * n // 3, WATER_CHANNEL] = 0.0
            x0 += 7 * width
        mat[~body] = 0.0

    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    if params:
        raise ValueError(f"unused phantom params: {sorted(params)}")
    return Phantom(name=f"{kind}-{seed}", material=mat)


# ----------------------------------------------------------------------
# dataset generation
# ----------------------------------------------------------------------

@dataclass
class DatasetRecord:
    phantom_id: str
    kind: str
    seed: int
    split: str
    image_size: int = 128
    views_per_channel: int = 180
    photons_per_ray: float = 2e6
    spectra_id: str = "default"
    params: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    records: list

    def __post_init__(self):
        seeds = [r.seed for r in self.records]
        if len(set(seeds)) != len(seeds):
            raise ValueError("record seeds must be unique")
        ids = {}
        for r in self.records:
            if r.split not in ("train", "test"):
                raise ValueError(f"bad split {r.split!r}")
            if ids.setdefault(r.phantom_id, r.split) != r.split:
                raise ValueError(f"{r.phantom_id} appears in both splits")

    def split(self, name):
        return [r for r in self.records if r.split == name]


def make_manifest(n_train, n_test, kind="ellipse_torso", image_size=128,
                  views_per_channel=180, photons_per_ray=2e6, base_seed=0,
                  params=None):
    records = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        records.append(DatasetRecord(
            phantom_id=f"{kind}-{base_seed + i:04d}", kind=kind,
            seed=base_seed + i, split=split, image_size=image_size,
            views_per_channel=views_per_channel,
            photons_per_ray=photons_per_ray, params=dict(params or {})))
    return DatasetManifest(records)


def record_geometries(rec):
    """Low/high-kVp angle subsets for one record's acquisition."""
    low, high = kvp_switching_angles(rec.views_per_channel)
    n_det = max(1, round(384 * rec.image_size / 256))
    base = dict(image_size=rec.image_size, pixel_pitch=1.0, n_detectors=n_det,
                detector_width=1.5, source_origin_dist=1000.0,
                source_detector_dist=1500.0)
    return (FanBeamGeometry(angles=low, **base),
            FanBeamGeometry(angles=high, **base))


_ROLES = ("material", "material_sinogram", "energy_sinogram", "counts")


def generate_dataset(manifest, out_dir, model=None):
    """Write phantom images, label sinograms, and noisy measurements.

    Each record yields four array files plus index entries; the material
    sinogram labels are the forward projections of the ground truth on the
    low-kVp angle subset (the reference geometry for all material-domain
    processing). Re-running with the same manifest reproduces every file
    bit for bit.
    """
    if model is None:
        from .spectral import default_spectral_model
        model = default_spectral_model()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    seen = set()
    for rec in manifest.records:
        if rec.phantom_id in seen:
            raise ValueError(f"duplicate output for {rec.phantom_id}")
        seen.add(rec.phantom_id)
        phantom = make_phantom(rec.kind, {"image_size": rec.image_size,
                                          **rec.params}, seed=rec.seed)
        g_low, g_high = record_geometries(rec)
        p_star = forward_project(phantom.material, g_low)
        sino = simulate_kvp_switched(phantom.material, g_low, g_high, model,
                                     rec.photons_per_ray, rng_seed=rec.seed)
        arrays = {
            "material": phantom.material,
            "material_sinogram": p_star,
            "energy_sinogram": sino.data,
            "counts": sino.counts,
        }
        for role in _ROLES:
            name = f"{rec.phantom_id}_{role}.sdmp"
            write_array(out_dir / name, arrays[role])
            entries.append((name, sha256_file(out_dir / name), role))
    write_index(out_dir / "index.tsv", entries)
    with open(out_dir / "manifest.yaml", "w") as f:
        yaml.safe_dump({"records": [vars(r) for r in manifest.records]}, f)
    return out_dir


def load_manifest(path):
    with open(path) as f:
        raw = yaml.safe_load(f)
    return DatasetManifest([DatasetRecord(**r) for r in raw["records"]])


def load_record_arrays(out_dir, phantom_id):
    out_dir = Path(out_dir)
    return {role: read_array(out_dir / f"{phantom_id}_{role}.sdmp")
            for role in _ROLES}
