"""Model-based reconstruction: weighted CG data consistency inside a
diffusion-prior HQS loop.

Each reverse step t predicts a clean image from the diffusion prior,
pulls it toward the decomposed sinogram by solving

    [A' diag(b) A + mu I] x = A' (b * p_hat) + mu z

with conjugate gradient (the left term A'(b*p_hat) is fixed and computed
once), then re-noises to step t-1 with the xi-weighted mix of recovered
and fresh noise.

The per-step proximal weight is mu_t = lambda / sigma_bar_t^2 scaled by
``prior_scale``. With ``prior_scale='auto'`` the scale is the median
diagonal of the data Hessian A' diag(b) A, which makes lambda a
dimensionless data-vs-prior ratio: invariant to photon count, geometry,
and density units, so the published default lambda keeps its meaning.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .diffusion import ddim_mix_step, predict_x0, sample_times
from .geometry import FanBeamGeometry, MaterialSinogram, Projector, back_project, back_project_sq, forward_project
from .sinodecomp import cov_weights
from .spectral import stat_weights

MATERIAL_INDEX = {"bone": 0, "water": 1}


@dataclass
class SolverConfig:
    lam: float = 1e-3
    xi: float = 1.0
    t_sample: int = 100
    cg_iters: int = 10
    cg_tol: float = 0.0
    nonneg_mode: str = "clamp"
    seed: int = 0
    material: str = "water"
    prior_scale: object = "auto"

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")
        if not 0.0 <= self.xi <= 1.0:
            raise ValueError("xi must lie in [0, 1]")
        if self.nonneg_mode not in ("clamp", "none"):
            raise ValueError("nonneg_mode must be 'clamp' or 'none'")
        if self.material not in MATERIAL_INDEX:
            raise ValueError(f"material must be one of {set(MATERIAL_INDEX)}")


@dataclass
class StepRecord:
    t: int
    cg_residual: float
    datafit: float
    prior_change: float
    wall_time: float


@dataclass
class SolveTrace:
    steps: list = field(default_factory=list)
    wall_time: float = 0.0
    prior_scale: float = 0.0


class CGFailure(RuntimeError):
    """CG produced a non-finite residual (inconsistent operator/weights)."""


def _as_operator(op):
    if isinstance(op, FanBeamGeometry):
        return Projector(op)
    return op


def conjugate_gradient(matvec, rhs, x0, iters, tol):
    """Plain CG on an SPD operator; returns (x, relative_residual)."""
    x = x0.copy()
    r = rhs - matvec(x)
    p = r.copy()
    rs = float(np.vdot(r, r))
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        rhs_norm = 1.0
    for _ in range(iters):
        if not np.isfinite(rs):
            raise CGFailure("non-finite CG residual")
        if np.sqrt(rs) / rhs_norm < tol or rs == 0.0:
            break
        ap = matvec(p)
        alpha = rs / float(np.vdot(p, ap))
        x += alpha * p
        r -= alpha * ap
        rs_new = float(np.vdot(r, r))
        p = r + (rs_new / rs) * p
        rs = rs_new
    if not np.isfinite(rs):
        raise CGFailure("non-finite CG residual")
    return x, np.sqrt(rs) / rhs_norm


def weighted_cg_solve(p_hat, b, z, mu, op, cg_iters=10, cg_tol=0.0,
                      x_init=None, x_c=None, nonneg=False):
    """Solve [A' diag(b) A + mu I] x = A'(b * p_hat) + mu z by CG.

    ``op`` is a FanBeamGeometry or any object with forward/adjoint methods.
    ``x_c`` may carry the precomputed A'(b * p_hat); ``x_init`` defaults to
    z. Returns (x, relative_residual). Negatives are zeroed after the solve
    when ``nonneg``.
    """
    if np.any(b <= 0) or mu <= 0:
        raise ValueError("need b > 0 and mu > 0 for an SPD system")
    op = _as_operator(op)
    if x_c is None:
        x_c = op.adjoint(b * p_hat)
    rhs = x_c + mu * z

    def matvec(x):
        return op.adjoint(b * op.forward(x)) + mu * x

    x0 = z if x_init is None else x_init
    x, resid = conjugate_gradient(matvec, rhs, x0, cg_iters, cg_tol)
    if nonneg:
        x = np.maximum(x, 0.0)
    return x, resid


def nll_datafit(x, p_hat, b, geom):
    """Weighted data misfit 0.5 * sum_n b_n (p_hat_n - [Ax]_n)^2.

    Accepts single-channel (2-D) or multi-channel (3-D) arrays; channels
    are summed.
    """
    if isinstance(p_hat, MaterialSinogram):
        p_hat = p_hat.data
    proj = forward_project(x, geom)
    d = p_hat - proj
    return 0.5 * float(np.sum(b * d * d))


def decomp_mod_reconstruct(sino, decomp, denoiser, sched, cfg, geom=None):
    """Reconstruct one material channel from a dual-energy sinogram.

    Runs the reverse diffusion loop with data-consistency CG solves; the
    decomposed sinogram, its covariance weights, the fixed back-projection
    A'(b*p_hat), and the prior scale are all computed once up front.
    Deterministic for a given config seed. Returns (density image, trace).
    """
    if getattr(decomp, "trained", True) is False:
        raise ValueError("decomposition net is untrained")
    geom = geom or sino.geometry
    chan = MATERIAL_INDEX[cfg.material]
    if getattr(denoiser, "material", None) not in (None, "", cfg.material):
        raise ValueError(
            f"denoiser was trained for {denoiser.material!r}, "
            f"config asks for {cfg.material!r}")

    t_start = time.time()
    p_hat = decomp.apply(sino.data)[:, :, chan]
    w = stat_weights(sino)
    b = cov_weights(decomp, sino.data, w.w).B[:, :, chan]

    op = Projector(geom)
    x_c = op.adjoint(b * p_hat)
    hess_diag = back_project_sq(b, geom)
    if cfg.prior_scale == "auto":
        inside = hess_diag[hess_diag > 0]
        prior_scale = float(np.median(inside)) if inside.size else 1.0
    else:
        prior_scale = float(cfg.prior_scale)

    rng = np.random.default_rng(cfg.seed)
    x_t = rng.standard_normal(geom.image_shape)
    ts = sample_times(sched, cfg.t_sample)
    trace = SolveTrace(prior_scale=prior_scale)
    x_dens = np.zeros(geom.image_shape)
    for i, t in enumerate(ts):
        step_t0 = time.time()
        t = int(t)
        z0_norm = predict_x0(denoiser, x_t, t, sched)
        z0_dens = denoiser.denormalize(z0_norm)
        mu = cfg.lam / sched.sigma_bar[t] ** 2 * prior_scale
        x_dens, resid = weighted_cg_solve(
            p_hat, b, z0_dens, mu, op, cg_iters=cfg.cg_iters,
            cg_tol=cfg.cg_tol, x_init=z0_dens, x_c=x_c,
            nonneg=cfg.nonneg_mode == "clamp")
        x0_norm = denoiser.normalize(x_dens)
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        eps_rand = rng.standard_normal(geom.image_shape)
        x_t, mixed = ddim_mix_step(x_t, x0_norm, t, t_prev, cfg.xi, eps_rand,
                                   sched, return_noise=True)
        record = getattr(denoiser, "record", None)
        if record is not None:
            record(mixed)
        trace.steps.append(StepRecord(
            t=t, cg_residual=resid,
            datafit=nll_datafit(x_dens, p_hat, b, geom),
            prior_change=float(np.linalg.norm(x_dens - z0_dens)),
            wall_time=time.time() - step_t0))
    if cfg.nonneg_mode == "clamp":
        x_dens = np.maximum(x_dens, 0.0)
    trace.wall_time = time.time() - t_start
    return x_dens, trace


def write_trace_csv(path, trace):
    lines = ["step,t,cg_residual,datafit,prior_change,time"]
    for i, s in enumerate(trace.steps):
        lines.append(f"{i},{s.t},{s.cg_residual:.6e},{s.datafit:.6e},"
                     f"{s.prior_change:.6e},{s.wall_time:.4f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
