"""Denoising-diffusion machinery: schedule, noising, denoiser, DDIM step.

The schedule arrays are indexed by the integer step t in [0, T]; index 0
is the clean endpoint (alpha_bar = 1, sigma_bar = 0) so the final reverse
update lands on the predicted clean image with no added noise.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule and the derived per-step quantities."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma_bar: np.ndarray

    def __post_init__(self):
        if np.any(self.beta[1:] <= 0) or np.any(self.beta[1:] >= 1):
            raise ValueError("beta_t must lie in (0, 1) for all t >= 1")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(np.diff(self.sigma_bar) <= 0):
            raise ValueError("sigma_bar must be strictly increasing")

    @classmethod
    def linear(cls, total_steps=1000, beta_start=1e-4, beta_end=0.02):
        beta = np.zeros(total_steps + 1)
        beta[1:] = np.linspace(beta_start, beta_end, total_steps)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma_bar = np.sqrt((1.0 - alpha_bar) / alpha_bar)
        return cls(beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                   sigma_bar=sigma_bar)

    @property
    def total_steps(self):
        return self.beta.size - 1

    def check_t(self, t, lowest=1):
        t = int(t)
        if not lowest <= t <= self.total_steps:
            raise ValueError(f"step {t} outside [{lowest}, {self.total_steps}]")
        return t


def sample_times(sched, n_steps):
    """Descending schedule indices for an n_steps reverse pass, DDIM-style.

    Uniformly spaced from T down to 1; n_steps == T visits every index.
    """
    if not 1 <= n_steps <= sched.total_steps:
        raise ValueError("n_steps must lie in [1, total_steps]")
    ts = np.unique(np.round(np.linspace(sched.total_steps, 1, n_steps)))[::-1]
    return ts.astype(int)


def forward_noise(x0, t, eps, sched):
    """Noised sample at step t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def x0_from_eps(x_t, eps, t, sched):
    """Algebraic inversion of :func:`forward_noise` given the noise."""
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    return (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def score_eval(denoiser, x_t, t, sched):
    """Score estimate s(x_t) = -eps(x_t, t) / sqrt(1 - ab_t)."""
    t = sched.check_t(t)
    eps = denoiser.predict_eps(x_t, t)
    return -eps / np.sqrt(1.0 - sched.alpha_bar[t])


def predict_x0(denoiser, x_t, t, sched):
    """Clean-image prediction (x_t + (1 - ab_t) score) / sqrt(ab_t)."""
    t = sched.check_t(t)
    s = score_eval(denoiser, x_t, t, sched)
    ab = sched.alpha_bar[t]
    return (x_t + (1.0 - ab) * s) / np.sqrt(ab)


def ddim_mix_step(x_t, x0_hat, t, t_prev, xi, eps_rand, sched,
                  return_noise=False):
    """Reverse update blending recovered and fresh noise.

    The recovered noise is eps_hat = (x_t - sqrt(ab_t) x0_hat)/sqrt(1-ab_t);
    the step jumps to sqrt(ab_{t_prev}) x0_hat + sqrt(1-ab_{t_prev}) *
    (sqrt(1-xi) eps_hat + sqrt(xi) eps_rand). xi = 0 is deterministic given
    x_t; xi = 1 discards x_t entirely in favor of fresh noise.
    """
    if not 0.0 <= xi <= 1.0:
        raise ValueError("xi must lie in [0, 1]")
    t = sched.check_t(t)
    t_prev = sched.check_t(t_prev, lowest=0)
    if t_prev >= t:
        raise ValueError("t_prev must be smaller than t")
    ab_t = sched.alpha_bar[t]
    ab_p = sched.alpha_bar[t_prev]
    eps_hat = (x_t - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    mixed = np.sqrt(1.0 - xi) * eps_hat + np.sqrt(xi) * eps_rand
    x_prev = np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * mixed
    if return_noise:
        return x_prev, mixed
    return x_prev


# ----------------------------------------------------------------------
# denoiser network
# ----------------------------------------------------------------------

class Denoiser:
    """Small residual conv net predicting the noise in a single-channel image.

    Six 3x3 convolutions: an input lift, two residual blocks of two convs
    each with a per-channel time bias from a sinusoidal embedding, and a
    zero-initialized output projection (so the initial prediction is 0 and
    the initial training loss sits at the noise variance). ``value_range``
    is the density interval mapped onto [-1, 1] for this material.
    """

    EMB_DIM = 32

    def __init__(self, channels=32, material="", value_range=(0.0, 2000.0),
                 seed=0):
        self.channels = int(channels)
        self.material = material
        self.value_range = (float(value_range[0]), float(value_range[1]))
        rng = np.random.default_rng(seed)
        c = self.channels

        def conv_init(c_out, c_in):
            scale = np.sqrt(1.0 / (c_in * 9))
            return rng.normal(0.0, scale, (c_out, c_in, 3, 3)).astype(np.float32)

        self.p = {
            "w_in": conv_init(c, 1), "b_in": np.zeros(c, np.float32),
            "w_out": np.zeros((1, c, 3, 3), np.float32),
            "b_out": np.zeros(1, np.float32),
        }
        for i in range(2):
            self.p[f"w1_{i}"] = conv_init(c, c)
            self.p[f"b1_{i}"] = np.zeros(c, np.float32)
            self.p[f"w2_{i}"] = conv_init(c, c)
            self.p[f"b2_{i}"] = np.zeros(c, np.float32)
            self.p[f"t_{i}"] = (rng.normal(0.0, np.sqrt(1.0 / self.EMB_DIM),
                                           (self.EMB_DIM, c)).astype(np.float32))
        self._order = sorted(self.p)
        self._cache = None

    @property
    def params(self):
        return [self.p[k] for k in self._order]

    # density <-> normalized diffusion units
    def normalize(self, x):
        lo, hi = self.value_range
        return (2.0 * (np.asarray(x) - lo) / (hi - lo) - 1.0)

    def denormalize(self, x):
        lo, hi = self.value_range
        return (np.asarray(x) + 1.0) * 0.5 * (hi - lo) + lo

    def forward(self, x, t, cache=False):
        """Noise prediction for x of shape (B, 1, H, W) at steps t (len B)."""
        x = np.asarray(x, dtype=np.float32)
        temb = nn.time_embedding(t, self.EMB_DIM).astype(np.float32)
        if temb.shape[0] == 1 and x.shape[0] > 1:
            temb = np.repeat(temb, x.shape[0], axis=0)
        saved = {"x": x, "temb": temb}
        z_in, saved["col_in"] = nn.conv3(x, self.p["w_in"], self.p["b_in"])
        saved["z_in"] = z_in
        h = nn.silu(z_in)
        for i in range(2):
            saved[f"h_{i}"] = h
            tb = temb @ self.p[f"t_{i}"]
            z1, saved[f"col1_{i}"] = nn.conv3(h, self.p[f"w1_{i}"],
                                              self.p[f"b1_{i}"])
            z1 = z1 + tb[:, :, None, None]
            saved[f"z1_{i}"] = z1
            a = nn.silu(z1)
            saved[f"a_{i}"] = a
            v, saved[f"col2_{i}"] = nn.conv3(a, self.p[f"w2_{i}"],
                                             self.p[f"b2_{i}"])
            h = h + v
        saved["h_out"] = h
        out, saved["col_out"] = nn.conv3(h, self.p["w_out"], self.p["b_out"])
        if cache:
            self._cache = saved
        return out

    def backward(self, dout):
        """Parameter gradients for the last cached forward pass."""
        s = self._cache
        g = {}
        g["w_out"], g["b_out"], dh = nn.conv3_grads(
            dout, s["col_out"], self.p["w_out"], s["h_out"].shape)
        for i in (1, 0):
            g[f"w2_{i}"], g[f"b2_{i}"], da = nn.conv3_grads(
                dh, s[f"col2_{i}"], self.p[f"w2_{i}"], s[f"a_{i}"].shape)
            dz1 = da * nn.silu_grad(s[f"z1_{i}"])
            g[f"t_{i}"] = s["temb"].T @ dz1.sum(axis=(2, 3))
            g[f"w1_{i}"], g[f"b1_{i}"], dh_blk = nn.conv3_grads(
                dz1, s[f"col1_{i}"], self.p[f"w1_{i}"], s[f"h_{i}"].shape)
            dh = dh + dh_blk
        dz_in = dh * nn.silu_grad(s["z_in"])
        g["w_in"], g["b_in"], _ = nn.conv3_grads(
            dz_in, s["col_in"], self.p["w_in"], s["x"].shape)
        return [g[k] for k in self._order]

    def predict_eps(self, x, t):
        """Single normalized image (H, W) in, predicted noise (H, W) out."""
        x = np.asarray(x, dtype=np.float32)
        single = x.ndim == 2
        if single:
            x = x[None, None]
        out = self.forward(x, np.full(x.shape[0], int(t)))
        return out[0, 0].astype(np.float64) if single else out.astype(np.float64)

    def save(self, path, sched=None):
        extra = {"material": self.material, "value_range": self.value_range,
                 "trained": True}
        if sched is not None:
            extra["schedule"] = {
                "total_steps": sched.total_steps,
                "beta_start": float(sched.beta[1]),
                "beta_end": float(sched.beta[-1]),
            }
        nn.save_checkpoint(path, kind="denoiser",
                           arch={"channels": self.channels},
                           extra=extra, params=self.params)

    @classmethod
    def load(cls, path):
        ck = nn.load_checkpoint(path)
        if ck["kind"] != "denoiser":
            raise nn.CheckpointError(f"{path}: not a denoiser checkpoint")
        net = cls(channels=ck["arch"]["channels"],
                  material=ck["extra"]["material"],
                  value_range=ck["extra"]["value_range"])
        for key, src in zip(net._order, ck["params"]):
            net.p[key] = src.astype(np.float32)
        sched_info = ck["extra"].get("schedule")
        sched = None
        if sched_info:
            sched = DiffusionSchedule.linear(sched_info["total_steps"],
                                             sched_info["beta_start"],
                                             sched_info["beta_end"])
        return net, sched


class EpsOracle:
    """Denoiser stand-in that returns caller-provided noise exactly.

    Before any noise is recorded it treats the whole input as noise, which
    makes the first clean-image prediction (numerically) zero. The solver
    feeds it the actually injected mixing noise each step via ``record``,
    so predict_x0 then reproduces the previous data-consistent estimate to
    machine precision: the upper-bound "perfect denoiser".
    """

    material = None
    value_range = (-1.0, 1.0)

    def __init__(self, value_range=(-1.0, 1.0)):
        self.value_range = (float(value_range[0]), float(value_range[1]))
        self._eps = None

    def normalize(self, x):
        lo, hi = self.value_range
        return 2.0 * (np.asarray(x) - lo) / (hi - lo) - 1.0

    def denormalize(self, x):
        lo, hi = self.value_range
        return (np.asarray(x) + 1.0) * 0.5 * (hi - lo) + lo

    def predict_eps(self, x, t):
        return np.asarray(x, dtype=np.float64) if self._eps is None else self._eps

    def record(self, eps):
        self._eps = np.asarray(eps, dtype=np.float64)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class DenoiserTrainReport:
    loss_trace: list = field(default_factory=list)
    val_loss: float = float("nan")
    checksum: str = ""
    wall_time: float = 0.0
    diverged: bool = False


def _random_crop(img, size, rng):
    h, w = img.shape
    if size >= min(h, w):
        return img
    i = rng.integers(0, h - size + 1)
    j = rng.integers(0, w - size + 1)
    return img[i:i + size, j:j + size]


def train_denoiser(images, sched, net_config=None, optimizer_config=None,
                   seed=0, material="", value_range=(0.0, 2000.0)):
    """Fit the noise predictor on clean single-channel density images.

    ``images`` are in density units; they are mapped to [-1, 1] with the
    fixed ``value_range`` recorded in the net. Each step draws a batch of
    random crops, steps t, and noises eps, and regresses eps by MSE.
    Deterministic for a given seed.
    """
    if len(images) == 0:
        raise ValueError("need a non-empty training set")
    net_config = dict(net_config or {})
    opt = {"lr": 1e-3, "batch": 6, "steps": 600, "crop": 64,
           "lr_decay": 0.98, "decay_every": 200, "val_images": 2}
    opt.update(optimizer_config or {})
    rng = np.random.default_rng(seed)
    net = Denoiser(material=material, value_range=value_range, seed=seed,
                   **net_config)
    norm = [np.asarray(net.normalize(im), dtype=np.float32) for im in images]
    n_val = min(opt["val_images"], max(0, len(norm) - 1))
    val, train = norm[:n_val], norm[n_val:]

    adam = nn.Adam(net.params, lr=opt["lr"], lr_decay=opt["lr_decay"],
                   decay_every=opt["decay_every"])
    report = DenoiserTrainReport()
    t0 = time.time()
    log_every = max(1, opt["steps"] // 20)
    run_loss, run_n = 0.0, 0
    for step in range(opt["steps"]):
        batch = np.stack([
            _random_crop(train[rng.integers(0, len(train))], opt["crop"], rng)
            for _ in range(opt["batch"])])[:, None]
        ts = rng.integers(1, sched.total_steps + 1, opt["batch"])
        eps = rng.standard_normal(batch.shape).astype(np.float32)
        ab = sched.alpha_bar[ts].astype(np.float32)[:, None, None, None]
        x_t = np.sqrt(ab) * batch + np.sqrt(1.0 - ab) * eps
        pred = net.forward(x_t, ts, cache=True)
        err = pred - eps
        loss = float(np.mean(err * err))
        if not np.isfinite(loss):
            report.diverged = True
            break
        grads = net.backward((2.0 * err / err.size).astype(np.float32))
        adam.step(net.params, grads)
        run_loss += loss
        run_n += 1
        if run_n == log_every or step == opt["steps"] - 1:
            report.loss_trace.append(run_loss / run_n)
            run_loss, run_n = 0.0, 0

    if val:
        vrng = np.random.default_rng(seed + 1)
        losses = []
        for im in val:
            ts = vrng.integers(1, sched.total_steps + 1, 4)
            for t in ts:
                eps = vrng.standard_normal(im.shape).astype(np.float32)
                x_t = forward_noise(im, int(t), eps, sched).astype(np.float32)
                pred = net.forward(x_t[None, None], np.array([t]))[0, 0]
                losses.append(float(np.mean((pred - eps) ** 2)))
        report.val_loss = float(np.mean(losses))
    report.checksum = nn.params_checksum(net.params)
    report.wall_time = time.time() - t0
    return net, report
