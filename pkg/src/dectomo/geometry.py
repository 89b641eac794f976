"""Fan-beam system geometry, matrix-free projector pair, and FBP.

The forward projector is a Joseph-style kernel: each ray is marched along
its dominant axis, sampling the image by linear interpolation at every
row/column crossing, weighted by the crossing step length. The adjoint
applies exactly the same weights in scatter form, so <Ax, u> == <x, A'u>
to float rounding, which the conjugate-gradient solver depends on.

Lengths are in mm; line integrals are returned in cm so that densities in
mg/cm^3 project to mg/cm^2.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit, prange

MM_TO_CM = 0.1


# ----------------------------------------------------------------------
# geometry and array containers
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class FanBeamGeometry:
    """Circular fan-beam scan over a square pixel grid.

    Parameters
    ----------
    image_size : int
        Pixels per side of the square grid.
    pixel_pitch : float
        Pixel side length (mm).
    n_detectors : int
        Detector bins per view.
    detector_width : float
        Detector bin width (mm).
    source_origin_dist, source_detector_dist : float
        Source-to-isocenter and source-to-detector distances (mm).
    angles : array of float
        View angles in degrees, strictly increasing, in [0, 360).
    """

    image_size: int
    pixel_pitch: float
    n_detectors: int
    detector_width: float
    source_origin_dist: float
    source_detector_dist: float
    angles: np.ndarray = field(repr=False)

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=np.float64)
        if angles.ndim != 1 or angles.size == 0:
            raise ValueError("angles must be a non-empty 1-D sequence")
        if np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if angles[0] < 0 or angles[-1] >= 360.0:
            raise ValueError("angles must lie in [0, 360)")
        if not (self.source_detector_dist > self.source_origin_dist > 0):
            raise ValueError("require source_detector_dist > source_origin_dist > 0")
        if self.n_detectors < 1 or self.detector_width <= 0:
            raise ValueError("need n_detectors >= 1 and detector_width > 0")
        if self.image_size < 1 or self.pixel_pitch <= 0:
            raise ValueError("need image_size >= 1 and pixel_pitch > 0")
        angles.flags.writeable = False
        object.__setattr__(self, "angles", angles)

    @property
    def n_views(self):
        return int(self.angles.size)

    @property
    def n_rays(self):
        return self.n_views * self.n_detectors

    @property
    def image_shape(self):
        return (self.image_size, self.image_size)

    @property
    def sino_shape(self):
        return (self.n_views, self.n_detectors)

    def with_angles(self, angles):
        return replace(self, angles=np.asarray(angles, dtype=np.float64))


def uniform_angles(n_views, start=0.0, span=360.0):
    """``n_views`` angles evenly covering ``span`` degrees from ``start``."""
    return start + span * np.arange(n_views) / n_views


def kvp_switching_angles(views_per_channel):
    """Angle subsets for fast kVp switching between adjacent views.

    The full rotation holds ``2 * views_per_channel`` views; the low-kVp
    channel takes the even views and the high-kVp channel the odd ones,
    so each channel spans 360 degrees at half the full sampling rate.
    """
    full = uniform_angles(2 * views_per_channel)
    return full[0::2].copy(), full[1::2].copy()


def default_geometry(image_size=128, views_per_channel=180, start_angle=0.0):
    """Scanner constants used throughout: 1.5 mm bins, 1000/1500 mm distances.

    384 detectors at the 256 grid, scaled to 192 at the desk-scale 128 grid.
    """
    n_det = max(1, round(384 * image_size / 256))
    return FanBeamGeometry(
        image_size=image_size,
        pixel_pitch=1.0,
        n_detectors=n_det,
        detector_width=1.5,
        source_origin_dist=1000.0,
        source_detector_dist=1500.0,
        angles=uniform_angles(views_per_channel, start=start_angle),
    )


class DimensionMismatchError(ValueError):
    """Array shape does not match the geometry it is used with."""


def _check_image(arr, geom):
    if arr.shape[:2] != geom.image_shape:
        raise DimensionMismatchError(
            f"image shape {arr.shape} does not match grid {geom.image_shape}"
        )


def _check_sino(arr, geom):
    if arr.shape[:2] != geom.sino_shape:
        raise DimensionMismatchError(
            f"sinogram shape {arr.shape} does not match {geom.sino_shape}"
        )


@dataclass
class MaterialImage:
    """Two-channel density map (mg/cm^3): channel 0 bone, channel 1 water."""

    data: np.ndarray
    geometry: FanBeamGeometry

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError("MaterialImage data must have shape (n, n, 2)")
        _check_image(self.data, self.geometry)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("MaterialImage data must be finite")

    @property
    def bone(self):
        return self.data[:, :, 0]

    @property
    def water(self):
        return self.data[:, :, 1]


@dataclass
class MaterialSinogram:
    """Two-channel material line integrals (mg/cm^2) over a geometry's rays."""

    data: np.ndarray
    geometry: FanBeamGeometry

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError("MaterialSinogram data must have shape (views, dets, 2)")
        _check_sino(self.data, self.geometry)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("MaterialSinogram data must be finite")


# ----------------------------------------------------------------------
# Joseph kernels
# ----------------------------------------------------------------------
#
# Both kernels iterate the same crossings with the same weights; keep them
# in lockstep when editing, including the axis tie-break, or the adjoint
# dot-product identity breaks.

@njit(cache=True, parallel=True)
def _joseph_forward(img, angles_rad, nx, ny, pitch, n_det, det_w, r_so, r_sd, out):
    half_x = 0.5 * (nx - 1)
    half_y = 0.5 * (ny - 1)
    for v in prange(angles_rad.size):
        th = angles_rad[v]
        cs = math.cos(th)
        sn = math.sin(th)
        src_x = r_so * cs
        src_y = r_so * sn
        cen_x = (r_so - r_sd) * cs
        cen_y = (r_so - r_sd) * sn
        for d in range(n_det):
            u = (d - 0.5 * (n_det - 1)) * det_w
            det_x = cen_x - u * sn
            det_y = cen_y + u * cs
            dir_x = det_x - src_x
            dir_y = det_y - src_y
            norm = math.sqrt(dir_x * dir_x + dir_y * dir_y)
            acc = 0.0
            if abs(dir_x) >= abs(dir_y):
                step = pitch * norm / abs(dir_x)
                slope = dir_y / dir_x
                # grid y-coordinate at column 0, advanced by slope per column
                gy = (src_y + slope * (-half_x * pitch - src_x)) / pitch + half_y
                for ix in range(nx):
                    iy0 = int(math.floor(gy))
                    f = gy - iy0
                    if 0 <= iy0 < ny:
                        acc += img[ix, iy0] * (1.0 - f)
                    if 0 <= iy0 + 1 < ny:
                        acc += img[ix, iy0 + 1] * f
                    gy += slope
            else:
                step = pitch * norm / abs(dir_y)
                slope = dir_x / dir_y
                gx = (src_x + slope * (-half_y * pitch - src_y)) / pitch + half_x
                for iy in range(ny):
                    ix0 = int(math.floor(gx))
                    f = gx - ix0
                    if 0 <= ix0 < nx:
                        acc += img[ix0, iy] * (1.0 - f)
                    if 0 <= ix0 + 1 < nx:
                        acc += img[ix0 + 1, iy] * f
                    gx += slope
            out[v, d] = acc * step * MM_TO_CM


ADJOINT_GROUPS = 16


@njit(cache=True, parallel=True)
def _joseph_adjoint_grouped(sino, angles_rad, nx, ny, pitch, n_det, det_w,
                            r_so, r_sd, buffers):
    # Views are dealt round-robin onto a fixed number of buffers; each
    # prange iteration owns one buffer and visits its views in a fixed
    # order, so the result is bit-identical for any thread count.
    half_x = 0.5 * (nx - 1)
    half_y = 0.5 * (ny - 1)
    n_groups = buffers.shape[0]
    for g in prange(n_groups):
        out = buffers[g]
        for v in range(g, angles_rad.size, n_groups):
            th = angles_rad[v]
            cs = math.cos(th)
            sn = math.sin(th)
            src_x = r_so * cs
            src_y = r_so * sn
            cen_x = (r_so - r_sd) * cs
            cen_y = (r_so - r_sd) * sn
            _adjoint_one_view(sino, v, nx, ny, pitch, n_det, det_w,
                              src_x, src_y, cen_x, cen_y, cs, sn, out)


@njit(cache=True)
def _adjoint_one_view(sino, v, nx, ny, pitch, n_det, det_w,
                      src_x, src_y, cen_x, cen_y, cs, sn, out):
    half_x = 0.5 * (nx - 1)
    half_y = 0.5 * (ny - 1)
    if True:
        for d in range(n_det):
            val = sino[v, d] * MM_TO_CM
            if val == 0.0:
                continue
            u = (d - 0.5 * (n_det - 1)) * det_w
            det_x = cen_x - u * sn
            det_y = cen_y + u * cs
            dir_x = det_x - src_x
            dir_y = det_y - src_y
            norm = math.sqrt(dir_x * dir_x + dir_y * dir_y)
            if abs(dir_x) >= abs(dir_y):
                step = pitch * norm / abs(dir_x)
                slope = dir_y / dir_x
                w = val * step
                gy = (src_y + slope * (-half_x * pitch - src_x)) / pitch + half_y
                for ix in range(nx):
                    iy0 = int(math.floor(gy))
                    f = gy - iy0
                    if 0 <= iy0 < ny:
                        out[ix, iy0] += w * (1.0 - f)
                    if 0 <= iy0 + 1 < ny:
                        out[ix, iy0 + 1] += w * f
                    gy += slope
            else:
                step = pitch * norm / abs(dir_y)
                slope = dir_x / dir_y
                w = val * step
                gx = (src_x + slope * (-half_y * pitch - src_y)) / pitch + half_x
                for iy in range(ny):
                    ix0 = int(math.floor(gx))
                    f = gx - ix0
                    if 0 <= ix0 < nx:
                        out[ix0, iy] += w * (1.0 - f)
                    if 0 <= ix0 + 1 < nx:
                        out[ix0 + 1, iy] += w * f
                    gx += slope


@njit(cache=True)
def _joseph_adjoint_sq(sino, angles_rad, nx, ny, pitch, n_det, det_w, r_so, r_sd, out):
    # Same traversal with squared weights: accumulates sum_n A_nm^2 * sino_n,
    # the exact diagonal of A' diag(sino) A. Used to scale the HQS prox term.
    half_x = 0.5 * (nx - 1)
    half_y = 0.5 * (ny - 1)
    for v in range(angles_rad.size):
        th = angles_rad[v]
        cs = math.cos(th)
        sn = math.sin(th)
        src_x = r_so * cs
        src_y = r_so * sn
        cen_x = (r_so - r_sd) * cs
        cen_y = (r_so - r_sd) * sn
        for d in range(n_det):
            val = sino[v, d]
            if val == 0.0:
                continue
            u = (d - 0.5 * (n_det - 1)) * det_w
            det_x = cen_x - u * sn
            det_y = cen_y + u * cs
            dir_x = det_x - src_x
            dir_y = det_y - src_y
            norm = math.sqrt(dir_x * dir_x + dir_y * dir_y)
            if abs(dir_x) >= abs(dir_y):
                step = pitch * norm / abs(dir_x) * MM_TO_CM
                slope = dir_y / dir_x
                for ix in range(nx):
                    x = (ix - half_x) * pitch
                    gy = (src_y + slope * (x - src_x)) / pitch + half_y
                    iy0 = int(math.floor(gy))
                    f = gy - iy0
                    if 0 <= iy0 < ny:
                        out[ix, iy0] += val * (step * (1.0 - f)) ** 2
                    if 0 <= iy0 + 1 < ny:
                        out[ix, iy0 + 1] += val * (step * f) ** 2
            else:
                step = pitch * norm / abs(dir_y) * MM_TO_CM
                slope = dir_x / dir_y
                for iy in range(ny):
                    y = (iy - half_y) * pitch
                    gx = (src_x + slope * (y - src_y)) / pitch + half_x
                    ix0 = int(math.floor(gx))
                    f = gx - ix0
                    if 0 <= ix0 < nx:
                        out[ix0, iy] += val * (step * (1.0 - f)) ** 2
                    if 0 <= ix0 + 1 < nx:
                        out[ix0 + 1, iy] += val * (step * f) ** 2


@njit(cache=True, parallel=True)
def _fan_backproject(filtered, angles_rad, nx, ny, pitch, n_det, du, r_so, out):
    # Pixel-driven weighted backprojection of ramp-filtered data sampled on
    # the virtual detector through the isocenter (spacing du, mm).
    half_x = 0.5 * (nx - 1)
    half_y = 0.5 * (ny - 1)
    dbeta = 2.0 * math.pi / angles_rad.size
    for ix in prange(nx):
        x = (ix - half_x) * pitch
        for iy in range(ny):
            y = (iy - half_y) * pitch
            acc = 0.0
            for v in range(angles_rad.size):
                th = angles_rad[v]
                cs = math.cos(th)
                sn = math.sin(th)
                ell = r_so - (x * cs + y * sn)
                if ell <= 1e-9:
                    continue
                s = r_so * (-x * sn + y * cs) / ell
                g = s / du + 0.5 * (n_det - 1)
                i0 = int(math.floor(g))
                f = g - i0
                q = 0.0
                if 0 <= i0 < n_det:
                    q += filtered[v, i0] * (1.0 - f)
                if 0 <= i0 + 1 < n_det:
                    q += filtered[v, i0 + 1] * f
                u2 = r_so / ell
                acc += q * u2 * u2
            out[ix, iy] = acc * dbeta


# ----------------------------------------------------------------------
# public operators
# ----------------------------------------------------------------------

def _apply_per_channel(kernel_call, arr, out_shape):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return kernel_call(arr)
    out = np.empty(out_shape + (arr.shape[2],), dtype=np.float64)
    for c in range(arr.shape[2]):
        out[:, :, c] = kernel_call(np.ascontiguousarray(arr[:, :, c]))
    return out


def forward_project(x, geom=None):
    """Fan-beam line integrals of ``x`` (cm-weighted), one channel at a time.

    ``x`` may be a MaterialImage (geometry taken from it) or an ndarray of
    shape (n, n) or (n, n, C) with ``geom`` supplied.
    """
    if isinstance(x, MaterialImage):
        out = forward_project(x.data, geom or x.geometry)
        return MaterialSinogram(out, geom or x.geometry)
    if geom is None:
        raise ValueError("geom is required for ndarray input")
    _check_image(x, geom)
    rad = np.deg2rad(geom.angles)

    def call(img2d):
        out = np.empty(geom.sino_shape, dtype=np.float64)
        _joseph_forward(img2d, rad, geom.image_size, geom.image_size,
                        geom.pixel_pitch, geom.n_detectors, geom.detector_width,
                        geom.source_origin_dist, geom.source_detector_dist, out)
        return out

    return _apply_per_channel(call, x, geom.sino_shape)


def back_project(p, geom=None):
    """Exact adjoint of :func:`forward_project` (unfiltered, may be negative)."""
    if isinstance(p, MaterialSinogram):
        return back_project(p.data, geom or p.geometry)
    if geom is None:
        raise ValueError("geom is required for ndarray input")
    _check_sino(p, geom)
    rad = np.deg2rad(geom.angles)

    def call(sino2d):
        out = np.zeros(geom.image_shape, dtype=np.float64)
        _joseph_adjoint(sino2d, rad, geom.image_size, geom.image_size,
                        geom.pixel_pitch, geom.n_detectors, geom.detector_width,
                        geom.source_origin_dist, geom.source_detector_dist, out)
        return out

    return _apply_per_channel(call, p, geom.image_shape)


def back_project_sq(p, geom):
    """sum_n A_nm^2 p_n per pixel: diagonal of A'*diag(p)*A, computed exactly."""
    if isinstance(p, MaterialSinogram):
        p = p.data
    _check_sino(p, geom)
    rad = np.deg2rad(geom.angles)

    def call(sino2d):
        out = np.zeros(geom.image_shape, dtype=np.float64)
        _joseph_adjoint_sq(sino2d, rad, geom.image_size, geom.image_size,
                           geom.pixel_pitch, geom.n_detectors, geom.detector_width,
                           geom.source_origin_dist, geom.source_detector_dist, out)
        return out

    return _apply_per_channel(call, p, geom.image_shape)


def _ramp_kernel(n_samples, spacing):
    """Band-limited ramp impulse response on 2*n_samples-1 taps."""
    n = np.arange(-(n_samples - 1), n_samples)
    h = np.zeros(n.size, dtype=np.float64)
    h[n == 0] = 1.0 / (4.0 * spacing**2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    return h


def ramp_filter_rows(rows, spacing):
    """Convolve each row with the ramp kernel via zero-padded FFT."""
    n_det = rows.shape[-1]
    kernel = _ramp_kernel(n_det, spacing)
    size = 1
    while size < n_det + kernel.size - 1:
        size *= 2
    K = np.fft.rfft(kernel, size)
    R = np.fft.rfft(rows, size, axis=-1)
    full = np.fft.irfft(R * K, size, axis=-1)
    return full[..., n_det - 1:2 * n_det - 1] * spacing


def fbp_reconstruct(p, geom=None):
    """Fan-beam filtered backprojection (Ram-Lak) of material line integrals.

    Input integrals are cm-weighted (as produced by :func:`forward_project`);
    the output is on the geometry's grid in the same density units as the
    projected image.
    """
    if isinstance(p, MaterialSinogram):
        return fbp_reconstruct(p.data, geom or p.geometry)
    if geom is None:
        raise ValueError("geom is required for ndarray input")
    if geom.n_views < 2:
        raise ValueError("FBP needs at least 2 view angles")
    _check_sino(p, geom)
    r_so = geom.source_origin_dist
    magnification = geom.source_detector_dist / r_so
    du = geom.detector_width / magnification  # virtual detector spacing, mm
    s = (np.arange(geom.n_detectors) - 0.5 * (geom.n_detectors - 1)) * du
    cos_w = r_so / np.sqrt(r_so**2 + s**2)
    rad = np.deg2rad(geom.angles)

    def call(sino2d):
        rows = sino2d / MM_TO_CM  # back to mm-weighted integrals
        filtered = ramp_filter_rows(rows * cos_w, du) * 0.5
        out = np.empty(geom.image_shape, dtype=np.float64)
        _fan_backproject(filtered, rad, geom.image_size, geom.image_size,
                         geom.pixel_pitch, geom.n_detectors, du, r_so, out)
        return out

    return _apply_per_channel(call, p, geom.image_shape)


class Projector:
    """Bound forward/adjoint pair for one geometry (the linear operator A)."""

    def __init__(self, geom):
        self.geom = geom

    def forward(self, img):
        return forward_project(img, self.geom)

    def adjoint(self, sino):
        return back_project(sino, self.geom)

    def hessian_diag(self, weights):
        """Diagonal of A' diag(weights) A."""
        return back_project_sq(weights, self.geom)
