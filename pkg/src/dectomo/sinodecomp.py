"""Learned sinogram-domain decomposition and propagated ray weights.

The decomposer maps a per-ray pair of log-attenuations to a per-ray pair
of material line integrals; it is applied pointwise over the sinogram, so
one trained net works for any view count. The statistical weights of the
decomposed data follow from pushing the photon-count weights through the
inverse Jacobian of the map.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .geometry import MaterialSinogram
from .spectral import EnergySinogram, StatWeights, h_forward, h_inverse_newton, h_jacobian


class UntrainedNetError(RuntimeError):
    """Applying a decomposition net that was never trained or initialized."""


@dataclass
class DecompNet:
    """Pointwise two-channel decomposer with frozen affine normalization."""

    mlp: nn.MLP
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    trained: bool = False

    @classmethod
    def create(cls, widths=(2, 64, 64, 64, 2), activation="tanh", seed=0):
        return cls(
            mlp=nn.MLP(widths, activation=activation,
                       rng=np.random.default_rng(seed)),
            in_mean=np.zeros(2), in_std=np.ones(2),
            out_mean=np.zeros(2), out_std=np.ones(2),
        )

    @classmethod
    def identity(cls):
        """Exact identity map; used to validate the weight propagation."""
        net = cls(mlp=nn.MLP((2, 2), activation="linear"),
                  in_mean=np.zeros(2), in_std=np.ones(2),
                  out_mean=np.zeros(2), out_std=np.ones(2), trained=True)
        net.mlp.weights[0][:] = np.eye(2)
        net.mlp.biases[0][:] = 0.0
        return net

    def apply(self, y):
        """Material estimate for log-attenuation rays of shape (..., 2)."""
        if not self.trained:
            raise UntrainedNetError("decomposition net has not been trained")
        y = np.asarray(y, dtype=np.float64)
        flat = (y.reshape(-1, 2) - self.in_mean) / self.in_std
        out = self.mlp.forward(flat) * self.out_std + self.out_mean
        return out.reshape(y.shape)

    def jacobian(self, y):
        """Exact d(material)/d(log-attenuation), shape (..., 2, 2)."""
        if not self.trained:
            raise UntrainedNetError("decomposition net has not been trained")
        y = np.asarray(y, dtype=np.float64)
        flat = (y.reshape(-1, 2) - self.in_mean) / self.in_std
        jac = self.mlp.jacobian(flat)
        jac = jac * self.out_std[None, :, None] / self.in_std[None, None, :]
        return jac.reshape(y.shape + (2,))

    def save(self, path):
        nn.save_checkpoint(
            path, kind="decomp",
            arch={"widths": list(self.mlp.widths),
                  "activation": self.mlp.activation},
            extra={"in_mean": self.in_mean.tolist(),
                   "in_std": self.in_std.tolist(),
                   "out_mean": self.out_mean.tolist(),
                   "out_std": self.out_std.tolist(),
                   "trained": self.trained},
            params=self.mlp.params)

    @classmethod
    def load(cls, path):
        ck = nn.load_checkpoint(path)
        if ck["kind"] != "decomp":
            raise nn.CheckpointError(f"{path}: not a decomposition checkpoint")
        net = cls.create(widths=ck["arch"]["widths"],
                         activation=ck["arch"]["activation"])
        for tgt, src in zip(net.mlp.params, ck["params"]):
            tgt[:] = src.astype(np.float64)
        e = ck["extra"]
        net.in_mean = np.asarray(e["in_mean"])
        net.in_std = np.asarray(e["in_std"])
        net.out_mean = np.asarray(e["out_mean"])
        net.out_std = np.asarray(e["out_std"])
        net.trained = bool(e["trained"])
        return net


class NewtonDecomposer:
    """Oracle decomposer backed by the damped-Newton inverse of h.

    Interface-compatible with :class:`DecompNet` so the reconstruction
    pipeline can swap it in for upper-bound runs.
    """

    trained = True

    def __init__(self, model):
        self.model = model

    def apply(self, y):
        return h_inverse_newton(y, self.model)

    def jacobian(self, y):
        p = h_inverse_newton(y, self.model)
        return np.linalg.inv(h_jacobian(p, self.model))


def decomp_apply(net, sino):
    """Decompose an energy sinogram into a material sinogram, ray by ray."""
    if isinstance(sino, EnergySinogram):
        return MaterialSinogram(net.apply(sino.data), sino.geometry)
    return net.apply(sino)


def decomp_jacobian(net, y_ray):
    return net.jacobian(y_ray)


@dataclass
class CovWeights:
    """Diagonal entries of the propagated inverse covariance, per ray.

    ``full`` keeps the complete 2x2 blocks for diagnostics; the solver reads
    only ``B``. ``n_floored`` counts rays whose Jacobian was too close to
    singular and whose weights were clamped to the floor.
    """

    B: np.ndarray
    full: np.ndarray = None
    n_floored: int = 0

    def __post_init__(self):
        if np.any(self.B <= 0):
            raise ValueError("covariance weight diagonals must be positive")


def cov_weights(net, y, w, floor_scale=1e-6):
    """Push per-ray count weights through the decomposition Jacobian.

    With J = d p_hat / d y per ray, the decomposed data has inverse
    covariance J^{-T} diag(w) J^{-1}; its diagonal weights the per-material
    data-fit norms. Near-singular Jacobians are floored and counted.
    """
    if isinstance(y, EnergySinogram):
        y = y.data
    if isinstance(w, StatWeights):
        w = w.w
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    jac = net.jacobian(y).reshape(-1, 2, 2)
    wf = w.reshape(-1, 2)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    scale = np.abs(jac).max(axis=(1, 2)) ** 2
    bad = np.abs(det) < 1e-12 * np.maximum(scale, 1e-30)
    det_safe = np.where(bad, 1.0, det)
    inv = np.empty_like(jac)
    inv[:, 0, 0] = jac[:, 1, 1] / det_safe
    inv[:, 1, 1] = jac[:, 0, 0] / det_safe
    inv[:, 0, 1] = -jac[:, 0, 1] / det_safe
    inv[:, 1, 0] = -jac[:, 1, 0] / det_safe
    full = np.einsum("nki,nk,nkj->nij", inv, wf, inv)
    diag = np.stack([full[:, 0, 0], full[:, 1, 1]], axis=1)
    diag[bad] = np.nan
    finite = diag[np.isfinite(diag)]
    floor = floor_scale * (np.median(finite) if finite.size else 1.0)
    floor = max(floor, 1e-300)
    n_floored = int(np.count_nonzero(~(diag > floor)))
    diag = np.where(diag > floor, diag, floor)
    return CovWeights(B=diag.reshape(y.shape), full=full.reshape(y.shape + (2,)),
                      n_floored=n_floored)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class TrainReport:
    loss_trace: list = field(default_factory=list)
    val_rmse: float = float("nan")
    checksum: str = ""
    wall_time: float = 0.0
    diverged: bool = False


@dataclass
class DecompDataset:
    """Per-ray training pairs: log-attenuation y and material labels p."""

    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1, 2)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 2)
        if self.y.shape != self.p.shape:
            raise ValueError("y and p must pair one label per ray")


def box_sampled_dataset(model, n, p_max=(4200.0, 4200.0), seed=0):
    """Noiseless pairs with p uniform over [0, p_max]^2 and y = h(p).

    Covers the full operating rectangle evenly, which phantom projections
    do not; used to fit the decomposer for oracle-fidelity checks.
    """
    rng = np.random.default_rng(seed)
    p = rng.uniform(0.0, 1.0, (n, 2)) * np.asarray(p_max)
    return DecompDataset(h_forward(p, model), p)


def rays_dataset(energy_sinos, material_sinos):
    """Flatten (y, p) sinogram pairs into a per-ray training set."""
    ys = [s.data if isinstance(s, EnergySinogram) else np.asarray(s)
          for s in energy_sinos]
    ps = [s.data if isinstance(s, MaterialSinogram) else np.asarray(s)
          for s in material_sinos]
    return DecompDataset(np.concatenate([y.reshape(-1, 2) for y in ys]),
                         np.concatenate([p.reshape(-1, 2) for p in ps]))


def train_decomp(dataset, net_config=None, optimizer_config=None, seed=0,
                 model=None):
    """Fit the pointwise decomposer by MSE on normalized channels.

    Returns (net, report). Deterministic for a given seed. When ``model``
    is given, the report's validation RMSE is measured against the Newton
    oracle applied to held-out inputs; otherwise against held-out labels.
    """
    net_config = dict(net_config or {})
    opt = {"lr": 1e-3, "batch": 512, "steps": 3000, "lr_decay": 0.98,
           "decay_every": 500, "val_fraction": 0.05}
    opt.update(optimizer_config or {})
    rng = np.random.default_rng(seed)
    net = DecompNet.create(seed=seed, **net_config)

    n = dataset.y.shape[0]
    n_val = max(1, int(n * opt["val_fraction"]))
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    y_tr, p_tr = dataset.y[train_idx], dataset.p[train_idx]

    net.in_mean = y_tr.mean(axis=0)
    net.in_std = np.maximum(y_tr.std(axis=0), 1e-12)
    net.out_mean = p_tr.mean(axis=0)
    net.out_std = np.maximum(p_tr.std(axis=0), 1e-12)
    yn = (y_tr - net.in_mean) / net.in_std
    pn = (p_tr - net.out_mean) / net.out_std

    adam = nn.Adam(net.mlp.params, lr=opt["lr"], lr_decay=opt["lr_decay"],
                   decay_every=opt["decay_every"])
    report = TrainReport()
    t0 = time.time()
    steps_per_epoch = max(1, min(200, yn.shape[0] // opt["batch"] or 1))
    epoch_loss, epoch_n = 0.0, 0
    for step in range(opt["steps"]):
        idx = rng.integers(0, yn.shape[0], opt["batch"])
        xb, tb = yn[idx], pn[idx]
        out = net.mlp.forward(xb, cache=True)
        err = out - tb
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            report.diverged = True
            break
        grads = net.mlp.backward(2.0 * err / err.size)
        adam.step(net.mlp.params, grads)
        epoch_loss += loss
        epoch_n += 1
        if epoch_n == steps_per_epoch or step == opt["steps"] - 1:
            report.loss_trace.append(epoch_loss / epoch_n)
            epoch_loss, epoch_n = 0.0, 0
    net.trained = True

    y_val = dataset.y[val_idx]
    ref = (h_inverse_newton(y_val, model) if model is not None
           else dataset.p[val_idx])
    pred = net.apply(y_val)
    ok = np.all(np.isfinite(ref), axis=1)
    report.val_rmse = float(np.sqrt(np.mean((pred[ok] - ref[ok]) ** 2)))
    report.checksum = nn.params_checksum(net.mlp.params)
    report.wall_time = time.time() - t0
    return net, report
