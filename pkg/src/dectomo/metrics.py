"""Image quality metrics: PSNR and windowed SSIM."""

import numpy as np

PSNR_CAP_DB = 99.0


def psnr(a, b, data_range, cap=PSNR_CAP_DB):
    """Peak signal-to-noise ratio in dB; identical inputs return ``cap``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return cap
    return 10.0 * np.log10(data_range**2 / mse)


def _gaussian_kernel(size, sigma):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, data_range, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity over all full Gaussian-weighted windows.

    11x11 window, sigma 1.5, C1 = (k1*range)^2, C2 = (k2*range)^2. Windowed
    moments are computed on 'valid' patches only (no padded borders).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    if min(a.shape) < window:
        raise ValueError("images smaller than the SSIM window")
    kern = _gaussian_kernel(window, sigma)

    def wfilter(img):
        view = np.lib.stride_tricks.sliding_window_view(img, (window, window))
        return np.einsum("ijkl,kl->ij", view, kern)

    mu_a = wfilter(a)
    mu_b = wfilter(b)
    var_a = wfilter(a * a) - mu_a**2
    var_b = wfilter(b * b) - mu_b**2
    cov = wfilter(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
