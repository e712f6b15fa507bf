"""Frequency-domain utilities: radix-2 FFT, corruption simulators, Perlin masks.

The corruption models are deliberately simple but frequency-domain
faithful: motion is simulated as per-line phase ramps in k-space,
undersampling zeroes acquisition lines while always keeping the central
low-frequency band.
"""

from __future__ import annotations

import numpy as np


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev = (rev << 1) | ((idx >> b) & 1)
    return rev


def _fft_last_axis(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey along the last axis (unnormalized)."""
    n = x.shape[-1]
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"extent {n} is not a power of two")
    out = np.ascontiguousarray(x[..., _bit_reverse_indices(n)]).astype(np.complex128)
    sign = 1.0 if inverse else -1.0
    m = 1
    while m < n:
        tw = np.exp(sign * 1j * np.pi * np.arange(m) / m)
        y = out.reshape(out.shape[:-1] + (n // (2 * m), 2, m))
        even = y[..., 0, :]
        odd = y[..., 1, :] * tw
        merged = np.concatenate([even + odd, even - odd], axis=-1)
        out = merged.reshape(out.shape)
        m *= 2
    return out


def fft2(x: np.ndarray, direction: str = "forward") -> np.ndarray:
    """2D radix-2 FFT of a (H,W) image; inverse is normalized by 1/(H*W)."""
    if x.ndim != 2:
        raise ValueError("fft2 expects a 2-d image")
    inverse = {"forward": False, "inverse": True}.get(direction)
    if inverse is None:
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    out = _fft_last_axis(np.asarray(x, dtype=np.complex128), inverse)
    out = _fft_last_axis(out.T, inverse).T
    if inverse:
        out = out / (x.shape[0] * x.shape[1])
    return out


def _signed_freqs(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.where(k <= n // 2, k, k - n)


def _bias_field(h: int, w: int, severity: float, rng: np.random.Generator) -> np.ndarray:
    ys = np.linspace(-1.0, 1.0, h)[:, None]
    xs = np.linspace(-1.0, 1.0, w)[None, :]
    c = rng.uniform(-0.6, 0.6, size=5) * severity
    poly = c[0] * ys + c[1] * xs + c[2] * ys * ys + c[3] * xs * xs + c[4] * ys * xs
    return np.exp(poly)


def corrupt(img: np.ndarray, kind: str, severity: float, rng: np.random.Generator) -> np.ndarray:
    """Simulate an acquisition artifact on a [0,1] image.

    noise:       additive Gaussian, sigma = 0.2 * severity
    bias:        multiplicative exp(low-order 2D polynomial) field
    motion:      random per-row phase ramps on a subset of k-space rows
    undersample: zero a random fraction (at most 0.6 * severity) of rows,
                 always keeping the central 12.5%
    """
    if img.ndim != 2:
        raise ValueError("corrupt expects a 2-d image")
    if severity == 0.0:
        return img.astype(np.float32).copy()
    h, w = img.shape

    if kind == "noise":
        out = img + rng.normal(0.0, 0.2 * severity, size=img.shape)
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    if kind == "bias":
        out = img * _bias_field(h, w, severity, rng)
        out = out / max(1.0, float(out.max()))
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    if kind == "motion":
        spectrum = fft2(img)
        kx = _signed_freqs(w)[None, :]
        moved = rng.random(h) < 0.3
        moved[0] = False  # keep the DC row so overall brightness survives
        shifts = rng.uniform(-3.0, 3.0, size=h) * severity
        ramps = np.exp(-2j * np.pi * kx * shifts[:, None] / w)
        spectrum = np.where(moved[:, None], spectrum * ramps, spectrum)
        out = fft2(spectrum, "inverse").real
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    if kind == "undersample":
        spectrum = fft2(img)
        ky = _signed_freqs(h)
        central = np.abs(ky) <= max(1, h // 16)  # central 12.5% band
        candidates = np.flatnonzero(~central)
        order = rng.permutation(candidates)
        frac = rng.uniform(0.3, 0.6) * severity
        n_zero = min(len(order), int(round(frac * h)))
        spectrum[order[:n_zero], :] = 0.0
        out = fft2(spectrum, "inverse").real
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    raise ValueError(f"unknown corruption kind {kind!r}")


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def perlin_field(shape: tuple[int, int], cell: int, rng: np.random.Generator) -> np.ndarray:
    """Classic gradient noise normalized to [0,1]."""
    h, w = shape
    if cell < 1 or h % cell or w % cell:
        raise ValueError(f"cell {cell} must divide image extents {h}x{w}")
    gh, gw = h // cell, w // cell
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(gh + 1, gw + 1))
    gy, gx = np.sin(angles), np.cos(angles)

    ys = (np.arange(h) + 0.5) / cell
    xs = (np.arange(w) + 0.5) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    def dot(dy_off, dx_off):
        gyy = gy[np.ix_(y0 + dy_off, x0 + dx_off)]
        gxx = gx[np.ix_(y0 + dy_off, x0 + dx_off)]
        return gyy * (fy - dy_off) + gxx * (fx - dx_off)

    uy, ux = _fade(fy), _fade(fx)
    top = dot(0, 0) * (1 - ux) + dot(0, 1) * ux
    bot = dot(1, 0) * (1 - ux) + dot(1, 1) * ux
    field = top * (1 - uy) + bot * uy
    return np.clip(0.5 + field / np.sqrt(2.0), 0.0, 1.0)


def perlin_mask(shape: tuple[int, int], cell: int = 8,
                threshold: float | None = None,
                rng: np.random.Generator | None = None,
                seed: int | None = None) -> np.ndarray:
    """Binary mask from thresholded Perlin noise.

    With no explicit threshold, the cut is placed at a quantile so the
    masked fraction lands uniformly in [0.1, 0.4].
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    field = perlin_field(shape, cell, rng)
    if threshold is None:
        frac = rng.uniform(0.1, 0.4)
        threshold = float(np.quantile(field, 1.0 - frac))
    return (field > threshold).astype(np.float32)
