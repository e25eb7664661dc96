"""Image diversity metrics on 8-bit grayscale images, plus 2-D sample-set summaries.

Entropies are in bits. RMSE works on intensities rescaled to [0, 1]; PSNR,
SSIM and FSIM work on the 0..255 scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .divergence import ShapeError


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.size == 0:
            raise ShapeError(f"grayscale image must be a non-empty 2-D grid, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
                raise ValueError("pixel intensities must be integers in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @classmethod
    def from_rgb(cls, rgb) -> "GrayImage":
        """Luma conversion with ITU-R BT.601 weights."""
        rgb = np.asarray(rgb, dtype=float)
        luma = rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114
        return cls(np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


class InfinitePSNR:
    """Returned by psnr() for identical images (MSE = 0)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "InfinitePSNR()"

    def __str__(self) -> str:
        return "inf"


INFINITE_PSNR = InfinitePSNR()


def _same_shape(a: GrayImage, b: GrayImage) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image dimensions differ: {a.shape} vs {b.shape}")


def _entropy_bits(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(max(-np.sum(p * np.log2(p)), 0.0))


def entropy_1d(img: GrayImage) -> float:
    return _entropy_bits(np.bincount(img.pixels.ravel(), minlength=256))


def neighborhood_mean_levels(img: GrayImage, neighborhood: int = 3) -> np.ndarray:
    """Neighborhood mean gray level, rounded half-up, with edge replication."""
    r = neighborhood // 2
    padded = np.pad(img.pixels.astype(np.int64), r, mode="edge")
    h, w = img.shape
    total = np.zeros((h, w), dtype=np.int64)
    for dy in range(neighborhood):
        for dx in range(neighborhood):
            total += padded[dy:dy + h, dx:dx + w]
    n = neighborhood * neighborhood
    return (2 * total + n) // (2 * n)


def entropy_2d(img: GrayImage, neighborhood: int = 3) -> float:
    if neighborhood < 1 or neighborhood % 2 == 0:
        raise ValueError("neighborhood must be a positive odd integer")
    if img.height < neighborhood or img.width < neighborhood:
        raise ShapeError(f"image {img.shape} is smaller than the {neighborhood}x{neighborhood} neighborhood")
    j = neighborhood_mean_levels(img, neighborhood)
    joint = img.pixels.astype(np.int64) * 256 + j
    return _entropy_bits(np.bincount(joint.ravel(), minlength=256 * 256))


def rmse(a: GrayImage, b: GrayImage) -> float:
    _same_shape(a, b)
    diff = (a.pixels.astype(float) - b.pixels.astype(float)) / 255.0
    return float(math.sqrt(np.mean(diff * diff)))


def psnr(a: GrayImage, b: GrayImage) -> float | InfinitePSNR:
    _same_shape(a, b)
    diff = a.pixels.astype(float) - b.pixels.astype(float)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return INFINITE_PSNR
    return 10.0 * math.log10(255.0 ** 2 / mse)


# ---------------------------------------------------------------------------
# SSIM

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: GrayImage, b: GrayImage) -> float:
    """Mean of l*c*s over all valid 11x11 Gaussian-weighted windows."""
    _same_shape(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape}")
    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    c3 = c2 / 2.0
    win = _gaussian_window()
    x = a.pixels.astype(float)
    y = b.pixels.astype(float)

    def filt(img):
        return convolve2d(img, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = np.maximum(filt(x * x) - mu_x ** 2, 0.0)
    var_y = np.maximum(filt(y * y) - mu_y ** 2, 0.0)
    cov = filt(x * y) - mu_x * mu_y
    sd_x, sd_y = np.sqrt(var_x), np.sqrt(var_y)
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    con = (2 * sd_x * sd_y + c2) / (var_x + var_y + c2)
    struct = (cov + c3) / (sd_x * sd_y + c3)
    return float(np.mean(lum * con * struct))


# ---------------------------------------------------------------------------
# FSIM: phase congruency from a log-Gabor bank plus Scharr gradient magnitude

FSIM_SCALES = 4
FSIM_ORIENTATIONS = 4
FSIM_MIN_WAVELENGTH = 6
FSIM_MULT = 2
FSIM_SIGMA_ON_F = 0.55
FSIM_D_THETA_ON_SIGMA = 1.2
FSIM_K = 2.0
FSIM_EPS = 1e-4
FSIM_T1 = 0.85
FSIM_T2 = 160.0
FSIM_MIN_SIZE = 32


def _freq_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    def axis(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
        return np.arange(-n / 2, n / 2) / n

    return np.meshgrid(axis(w), axis(h))


def _log_gabor_bank(h: int, w: int) -> np.ndarray:
    """Filters in the (unshifted) frequency plane, shape (orient, scale, h, w)."""
    fx, fy = _freq_grid(h, w)
    radius = np.sqrt(fx ** 2 + fy ** 2)
    theta = np.arctan2(-fy, fx)
    lowpass = np.fft.ifftshift(1.0 / (1.0 + (radius / 0.45) ** 30))
    radius = np.fft.ifftshift(radius)
    theta = np.fft.ifftshift(theta)
    radius[0, 0] = 1.0
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    theta_sigma = math.pi / FSIM_ORIENTATIONS / FSIM_D_THETA_ON_SIGMA

    radial = []
    for s in range(FSIM_SCALES):
        f0 = 1.0 / (FSIM_MIN_WAVELENGTH * FSIM_MULT ** s)
        lg = np.exp(-(np.log(radius / f0) ** 2) / (2 * math.log(FSIM_SIGMA_ON_F) ** 2)) * lowpass
        lg[0, 0] = 0.0
        radial.append(lg)
    bank = np.empty((FSIM_ORIENTATIONS, FSIM_SCALES, h, w))
    for o in range(FSIM_ORIENTATIONS):
        angle = o * math.pi / FSIM_ORIENTATIONS
        ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
        dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
        spread = np.exp(-(np.abs(np.arctan2(ds, dc)) ** 2) / (2 * theta_sigma ** 2))
        for s in range(FSIM_SCALES):
            bank[o, s] = radial[s] * spread
    return bank


def phase_congruency(pixels: np.ndarray, bank: np.ndarray | None = None) -> np.ndarray:
    """Noise-compensated phase congruency map (Kovesi's PC_2 measure)."""
    img = np.asarray(pixels, dtype=float)
    h, w = img.shape
    if bank is None:
        bank = _log_gabor_bank(h, w)
    spectrum = np.fft.fft2(img)
    energy_all = np.zeros((h, w))
    an_all = np.zeros((h, w))
    for o in range(FSIM_ORIENTATIONS):
        eo = np.fft.ifft2(spectrum[None] * bank[o])  # (scale, h, w)
        even, odd = eo.real, eo.imag
        amp = np.abs(eo)
        sum_e, sum_o = even.sum(axis=0), odd.sum(axis=0)
        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + FSIM_EPS
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.sum(even * mean_e + odd * mean_o - np.abs(even * mean_o - odd * mean_e), axis=0)

        # noise threshold from the smallest-scale response (Rayleigh model)
        em_n = np.sum(bank[o, 0] ** 2)
        mean_e2n = -np.median(amp[0] ** 2) / math.log(0.5)
        noise_power = mean_e2n / em_n
        spatial = np.fft.ifft2(bank[o]).real * math.sqrt(h * w)
        sum_an2 = np.sum(spatial ** 2)
        sum_ai_aj = 0.0
        for s in range(FSIM_SCALES - 1):
            sum_ai_aj += np.sum(spatial[s] * spatial[s + 1:])
        noise_energy2 = 2 * noise_power * sum_an2 + 4 * noise_power * sum_ai_aj
        tau = math.sqrt(noise_energy2 / 2)
        threshold = tau * math.sqrt(math.pi / 2) + FSIM_K * math.sqrt((2 - math.pi / 2) * tau ** 2)
        threshold /= 1.7

        energy_all += np.maximum(energy - threshold, 0.0)
        an_all += amp.sum(axis=0)
    return energy_all / (an_all + FSIM_EPS)


SCHARR_X = np.array([[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0


def gradient_magnitude(pixels: np.ndarray) -> np.ndarray:
    img = np.asarray(pixels, dtype=float)
    gx = convolve2d(img, SCHARR_X, mode="same")
    gy = convolve2d(img, SCHARR_X.T, mode="same")
    return np.sqrt(gx ** 2 + gy ** 2)


def fsim(a: GrayImage, b: GrayImage) -> float:
    _same_shape(a, b)
    if a.height < FSIM_MIN_SIZE or a.width < FSIM_MIN_SIZE:
        raise ShapeError(f"FSIM needs at least {FSIM_MIN_SIZE}x{FSIM_MIN_SIZE} pixels, got {a.shape}")
    x, y = a.pixels.astype(float), b.pixels.astype(float)
    # average-pool large images down to roughly 256 px on the short side
    f = max(1, round(min(a.shape) / 256))
    if f > 1:
        h, w = (a.height // f) * f, (a.width // f) * f
        x = x[:h, :w].reshape(h // f, f, w // f, f).mean(axis=(1, 3))
        y = y[:h, :w].reshape(h // f, f, w // f, f).mean(axis=(1, 3))
    bank = _log_gabor_bank(*x.shape)
    pc1, pc2 = phase_congruency(x, bank), phase_congruency(y, bank)
    gm1, gm2 = gradient_magnitude(x), gradient_magnitude(y)
    s_pc = (2 * pc1 * pc2 + FSIM_T1) / (pc1 ** 2 + pc2 ** 2 + FSIM_T1)
    s_gm = (2 * gm1 * gm2 + FSIM_T2) / (gm1 ** 2 + gm2 ** 2 + FSIM_T2)
    pc_max = np.maximum(pc1, pc2)
    denom = pc_max.sum()
    if denom == 0.0:
        return 1.0 if np.array_equal(x, y) else float(np.mean(s_pc * s_gm))
    return float(np.sum(s_pc * s_gm * pc_max) / denom)


# ---------------------------------------------------------------------------
# 2-D sample sets


@dataclass(frozen=True)
class SampleSet:
    samples: np.ndarray  # (n, 2)
    condition: int = 0

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=float).reshape(-1, 2)
        if arr.shape[0] == 0:
            raise ValueError("sample set must be non-empty")
        object.__setattr__(self, "samples", arr)


@dataclass(frozen=True)
class DiversitySummary:
    mode_coverage: int
    mean_pairwise_distance: float


def mean_pairwise_distance(points: np.ndarray, max_points: int = 2000, seed: int = 0) -> float:
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] > max_points:
        idx = np.random.default_rng(seed).choice(pts.shape[0], max_points, replace=False)
        pts = pts[idx]
    n = pts.shape[0]
    if n < 2:
        return 0.0
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    return float(d[np.triu_indices(n, 1)].mean())


def sample_diversity(sample_set: SampleSet, mode_centers, radius: float) -> DiversitySummary:
    pts = sample_set.samples
    centers = np.asarray(mode_centers, dtype=float).reshape(-1, 2)
    d = np.sqrt(np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2))
    covered = int(np.sum(np.any(d <= radius, axis=0)))
    return DiversitySummary(covered, mean_pairwise_distance(pts))


def rasterize(sample_set: SampleSet, grid: int = 64, extent: float = 3.0) -> GrayImage:
    """2-D histogram over [-extent, extent]^2 scaled so the fullest cell is 255.

    Row index follows y, column index follows x.
    """
    if grid < 16:
        raise ValueError("grid must be at least 16")
    pts = sample_set.samples
    edges = np.linspace(-extent, extent, grid + 1)
    hist, _, _ = np.histogram2d(pts[:, 1], pts[:, 0], bins=[edges, edges])
    peak = hist.max()
    if peak == 0:
        return GrayImage(np.zeros((grid, grid), dtype=np.uint8))
    return GrayImage(np.floor(255.0 * hist / peak + 0.5).astype(np.uint8))
