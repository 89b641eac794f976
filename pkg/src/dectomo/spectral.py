"""Poly-energetic dual-kVp physics: spectra, attenuation, and counts.

The per-ray map ``h`` sends material line integrals p = (bone, water) in
mg/cm^2 to expected log-attenuation per energy channel,

    y_k = -log( sum_E S_k(E) exp(-p1*phi1(E) - p2*phi2(E)) ),

with each spectrum normalized to unit sum so h(0) = 0. Its analytic
Jacobian and a damped-Newton inverse provide the ground-truth sinogram
decomposition oracle. Photon counts follow a Poisson model around
I0 * exp(-y).
"""

from dataclasses import dataclass, field
from importlib.resources import files

import numpy as np
from scipy.special import logsumexp

from .geometry import MaterialImage, MaterialSinogram, forward_project

# Mass attenuation references (keV, cm^2/g), standard tabulations covering
# the diagnostic range; interpolation below is linear in log-log.
_GRID_KEV = np.array([10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0,
                      80.0, 100.0, 150.0, 200.0])
_MU_RHO_WATER = np.array([5.329, 1.673, 0.8096, 0.3756, 0.2683, 0.2269,
                          0.2059, 0.1837, 0.1707, 0.1505, 0.1370])
_MU_RHO_BONE = np.array([28.51, 9.032, 4.001, 1.331, 0.6655, 0.4242,
                         0.3148, 0.2229, 0.1855, 0.1480, 0.1309])
_MU_RHO_AL = np.array([26.23, 7.955, 3.441, 1.128, 0.5685, 0.3681,
                       0.2778, 0.2018, 0.1704, 0.1378, 0.1223])
_MU_RHO_CU = np.array([215.9, 74.05, 33.79, 10.92, 4.862, 2.613,
                       1.593, 0.7630, 0.4584, 0.2217, 0.1559])

AL_DENSITY_G_CM3 = 2.699
CU_DENSITY_G_CM3 = 8.96

BONE_DENSITY_MG_CM3 = 1850.0
WATER_DENSITY_MG_CM3 = 1000.0


def _loglog_interp(e, e_tab, v_tab):
    e = np.asarray(e, dtype=np.float64)
    return np.exp(np.interp(np.log(e), np.log(e_tab), np.log(v_tab)))


def kramers_filtered_spectrum(kvp, al_mm, cu_mm, e_min=10.0, step=0.5):
    """Analytic tube spectrum: Kramers bremsstrahlung with Al/Cu filtration.

    Returns (energies_keV, relative_fluence) on a ``step`` keV grid with the
    top bin strictly below ``kvp``. Fluence is scaled to peak 1. The 0.5 keV
    default keeps the midpoint-rule quadrature error of ``h`` below 1e-4
    relative against a 10x-refined evaluation.
    """
    energies = np.arange(e_min, float(kvp), step)
    fluence = (kvp - energies) / energies
    atten = (_loglog_interp(energies, _GRID_KEV, _MU_RHO_AL)
             * AL_DENSITY_G_CM3 * al_mm / 10.0
             + _loglog_interp(energies, _GRID_KEV, _MU_RHO_CU)
             * CU_DENSITY_G_CM3 * cu_mm / 10.0)
    fluence = fluence * np.exp(-atten)
    return energies, fluence / fluence.max()


def write_two_column(path, energies, values, comments=()):
    lines = [f"# {c}" for c in comments]
    lines += [f"{e:.6g} {v:.8e}" for e, v in zip(energies, values)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_two_column(path):
    """Parse a `# comment` / two-column whitespace-separated data file.

    Returns (energies, values, meta) where meta holds any `# key: value`
    comment entries.
    """
    energies, values, meta = [], [], {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, _, val = body.partition(":")
                    meta[key.strip()] = val.strip()
                continue
            cols = line.split()
            energies.append(float(cols[0]))
            values.append(float(cols[1]))
    return np.asarray(energies), np.asarray(values), meta


@dataclass(frozen=True)
class Spectrum:
    """Relative source fluence per 1 keV energy bin."""

    energies: np.ndarray
    weights: np.ndarray
    kvp: float
    kvp_label: str = ""

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if e.ndim != 1 or e.shape != w.shape:
            raise ValueError("energies and weights must be matching 1-D arrays")
        if np.any(np.diff(e) <= 0):
            raise ValueError("energies must be strictly increasing")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be >= 0 with at least one positive bin")
        if np.any(w[e >= self.kvp] > 0):
            raise ValueError("bins at or above the kVp must have zero weight")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "weights", w)
        if not self.kvp_label:
            object.__setattr__(self, "kvp_label", f"{self.kvp:g}kVp")

    @property
    def normalized(self):
        return self.weights / self.weights.sum()


@dataclass(frozen=True)
class MassAttenuationTable:
    """Tabulated mass attenuation (cm^2/mg) with log-log interpolation."""

    material_name: str
    energies: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v <= 0):
            raise ValueError("mass attenuation values must be positive")
        if np.any(np.diff(e) <= 0):
            raise ValueError("energies must be strictly increasing")
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "values", v)

    def __call__(self, energies_kev):
        e = np.asarray(energies_kev, dtype=np.float64)
        if e.min() < self.energies[0] or e.max() > self.energies[-1]:
            raise ValueError(
                f"{self.material_name} table covers "
                f"[{self.energies[0]}, {self.energies[-1]}] keV, "
                f"asked for [{e.min()}, {e.max()}]"
            )
        return _loglog_interp(e, self.energies, self.values)


class SpectralModel:
    """Two spectra (low, high kVp) bound to two basis materials (bone, water).

    Caches, per energy channel, the normalized spectrum and the attenuation
    curves sampled on that channel's own grid; the two channels never need a
    common grid.
    """

    def __init__(self, spectra, tables):
        if len(spectra) != 2 or len(tables) != 2:
            raise ValueError("need exactly two spectra and two material tables")
        self.spectra = tuple(spectra)
        self.tables = tuple(tables)
        self._log_s = []
        self._phi = []
        for sp in self.spectra:
            sn = sp.normalized
            keep = sn > 0
            self._log_s.append(np.log(sn[keep]))
            e = sp.energies[keep]
            self._phi.append(np.stack([tab(e) for tab in self.tables], axis=1))
        zero = h_forward(np.zeros(2), self)
        if np.max(np.abs(zero)) > 1e-12:
            raise ValueError("h(0) != 0; spectra are not normalized consistently")

    @property
    def material_names(self):
        return tuple(t.material_name for t in self.tables)


def _channel_logits(p, model, k):
    # log of per-bin transmitted weight: log S_k(E) - p . phi(E)
    phi = model._phi[k]
    return model._log_s[k] - p @ phi.T


def h_forward(p, model):
    """Expected log-attenuation per channel for material line integrals p.

    ``p`` has shape (..., 2) in mg/cm^2; the result matches that shape.
    Evaluated with log-sum-exp so large p cannot underflow.
    """
    p = np.asarray(p, dtype=np.float64)
    out = np.empty(p.shape, dtype=np.float64)
    for k in range(2):
        out[..., k] = -logsumexp(_channel_logits(p, model, k), axis=-1)
    return out


def h_jacobian(p, model):
    """Analytic Jacobian of :func:`h_forward`: (..., 2, 2), entry (k, s).

    Row k is the transmission-weighted average of phi_s over channel k's
    spectrum; every entry is strictly positive.
    """
    p = np.asarray(p, dtype=np.float64)
    out = np.empty(p.shape + (2,), dtype=np.float64)
    for k in range(2):
        logits = _channel_logits(p, model, k)
        logits = logits - logits.max(axis=-1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=-1, keepdims=True)
        out[..., k, :] = w @ model._phi[k]
    return out


def h_inverse_newton(y, model, tol=1e-12, max_iter=60):
    """Damped Newton solve of h(p) = y, the sinogram-domain decomposition.

    Vectorized over leading dimensions of ``y``. Rays that fail to reach
    ``tol`` (inf-norm residual) within ``max_iter`` are returned as NaN,
    which signals y outside the range of h or ill-conditioning.
    """
    y = np.asarray(y, dtype=np.float64)
    flat = y.reshape(-1, 2)
    j0 = h_jacobian(np.zeros(2), model)
    p = np.linalg.solve(j0[None, :, :], flat[:, :, None])[:, :, 0]
    res = h_forward(p, model) - flat
    err = np.abs(res).max(axis=1)
    active = err > tol
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        jac = h_jacobian(p[idx], model)
        delta = -np.linalg.solve(jac, res[idx][:, :, None])[:, :, 0]
        step = np.ones(idx.size)
        cur = err[idx]
        for _ in range(25):
            trial = p[idx] + step[:, None] * delta
            trial_res = h_forward(trial, model) - flat[idx]
            trial_err = np.abs(trial_res).max(axis=1)
            better = trial_err < cur
            if better.all():
                break
            step = np.where(better, step, step * 0.5)
        p[idx] = p[idx] + step[:, None] * delta
        res[idx] = h_forward(p[idx], model) - flat[idx]
        err[idx] = np.abs(res[idx]).max(axis=1)
        active = err > tol
    p[active] = np.nan
    return p.reshape(y.shape)


# ----------------------------------------------------------------------
# measurement containers and simulation
# ----------------------------------------------------------------------

@dataclass
class EnergySinogram:
    """Per-ray log-attenuation y (views, dets, 2) with optional raw counts.

    ``geometry`` is the angle subset the low channel (and any material-stage
    processing) uses; ``geometry_high`` is the high channel's subset when the
    acquisition interleaves kVp between adjacent views, None when shared.
    """

    data: np.ndarray
    geometry: object
    counts: np.ndarray = None
    geometry_high: object = None
    n_clipped: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError("EnergySinogram data must have shape (views, dets, 2)")
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=np.float64)
            if self.counts.shape != self.data.shape:
                raise ValueError("counts shape must match data shape")
            if np.any(self.counts <= 0):
                raise ValueError("counts must be positive")


@dataclass
class StatWeights:
    """Per-ray inverse variances of y, one per energy channel."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.any(self.w <= 0):
            raise ValueError("statistical weights must be positive")


def simulate_counts(x, geom, model, photons_per_ray, rng_seed=0, noiseless=False):
    """Simulate dual-channel transmission data on one shared angle set.

    Mean counts per ray and channel are I0 * exp(-h([Ax]_n)); counts are
    Poisson draws (deterministic for a given seed), zero counts are clipped
    to 1 and tallied in ``n_clipped``. ``noiseless=True`` returns y = h(Ax)
    exactly with counts pinned at I0.
    """
    if photons_per_ray <= 0:
        raise ValueError("photons_per_ray must be positive")
    if isinstance(x, MaterialImage):
        x = x.data
    if np.any(x < 0):
        raise ValueError("material densities must be non-negative")
    p = forward_project(x, geom)
    ybar = h_forward(p, model)
    if noiseless:
        counts = np.full(ybar.shape, float(photons_per_ray))
        return EnergySinogram(ybar, geom, counts=counts)
    mean_counts = photons_per_ray * np.exp(-ybar)
    rng = np.random.default_rng(rng_seed)
    counts = rng.poisson(mean_counts).astype(np.float64)
    n_clipped = int(np.count_nonzero(counts < 1))
    counts = np.maximum(counts, 1.0)
    y = -np.log(counts / photons_per_ray)
    return EnergySinogram(y, geom, counts=counts, n_clipped=n_clipped)


def simulate_kvp_switched(x, geom_low, geom_high, model, photons_per_ray,
                          rng_seed=0, noiseless=False):
    """Interleaved fast-switching acquisition: channel k on its own subset.

    Row v of the result pairs the low view at ``geom_low.angles[v]`` with the
    adjacent high view at ``geom_high.angles[v]``; no cross-channel
    interpolation is performed.
    """
    if geom_low.n_views != geom_high.n_views:
        raise ValueError("channel subsets must have equal view counts")
    sinos = []
    for k, g in enumerate((geom_low, geom_high)):
        s = simulate_counts(x, g, model, photons_per_ray,
                            rng_seed=rng_seed + k, noiseless=noiseless)
        sinos.append(s)
    data = np.stack([sinos[0].data[:, :, 0], sinos[1].data[:, :, 1]], axis=2)
    counts = np.stack([sinos[0].counts[:, :, 0], sinos[1].counts[:, :, 1]], axis=2)
    return EnergySinogram(data, geom_low, counts=counts, geometry_high=geom_high,
                          n_clipped=sinos[0].n_clipped + sinos[1].n_clipped)


def stat_weights(sino):
    """Inverse variance of y per ray: the recorded counts."""
    if sino.counts is None:
        raise ValueError("sinogram carries no counts; weights undefined")
    return StatWeights(sino.counts.copy())


# ----------------------------------------------------------------------
# packaged defaults
# ----------------------------------------------------------------------

def _data_path(name):
    return files("dectomo").joinpath("data").joinpath(name)


def load_spectrum(path, kvp=None, label=""):
    energies, weights, meta = read_two_column(path)
    if kvp is None:
        if "kvp" not in meta:
            raise ValueError(f"{path}: no kvp given and none recorded in file")
        kvp = float(meta["kvp"])
    return Spectrum(energies, weights, kvp=float(kvp), kvp_label=label)


def load_attenuation(path, material_name):
    energies, values, _ = read_two_column(path)
    return MassAttenuationTable(material_name, energies, values)


def default_spectral_model():
    """90/150 kVp filtered spectra with bone and water basis materials."""
    low = load_spectrum(_data_path("spectrum_090kvp.txt"))
    high = load_spectrum(_data_path("spectrum_150kvp.txt"))
    bone = load_attenuation(_data_path("atten_bone.txt"), "bone")
    water = load_attenuation(_data_path("atten_water.txt"), "water")
    return SpectralModel((low, high), (bone, water))


def monoenergetic_model(e_kev=60.0):
    """Single-bin spectra at one energy; h collapses to a linear map."""
    sp = Spectrum(np.array([e_kev]), np.array([1.0]), kvp=e_kev + 1.0)
    bone = MassAttenuationTable("bone", _GRID_KEV, _MU_RHO_BONE / 1000.0)
    water = MassAttenuationTable("water", _GRID_KEV, _MU_RHO_WATER / 1000.0)
    return SpectralModel((sp, sp), (bone, water))


def regenerate_data_files(out_dir):
    """Write the packaged spectra and attenuation files from first principles."""
    e90, w90 = kramers_filtered_spectrum(90, al_mm=1.5, cu_mm=0.2)
    write_two_column(
        out_dir / "spectrum_090kvp.txt", e90, w90,
        comments=["filtered tube spectrum, relative fluence per 0.5 keV bin",
                  "kvp: 90", "filtration: 1.5 mm Al + 0.2 mm Cu"])
    e150, w150 = kramers_filtered_spectrum(150, al_mm=1.5, cu_mm=1.2)
    write_two_column(
        out_dir / "spectrum_150kvp.txt", e150, w150,
        comments=["filtered tube spectrum, relative fluence per 0.5 keV bin",
                  "kvp: 150", "filtration: 1.5 mm Al + 1.2 mm Cu"])
    write_two_column(
        out_dir / "atten_water.txt", _GRID_KEV, _MU_RHO_WATER / 1000.0,
        comments=["mass attenuation of liquid water, keV vs cm^2/mg"])
    write_two_column(
        out_dir / "atten_bone.txt", _GRID_KEV, _MU_RHO_BONE / 1000.0,
        comments=["mass attenuation of cortical bone, keV vs cm^2/mg"])
