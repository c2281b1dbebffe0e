"""Synthetic natural-like image generation for fixtures and desk-scale runs.

The generator mixes power-law random fields, smooth gradients with blobs,
low-frequency cosine mixtures and simple shape scenes. Families are tuned so
the DCT low-frequency block carries strong, image-specific energy: random
pairs disagree on roughly half the non-DC hash bits while blur and mild JPEG
leave the hash nearly unchanged, mirroring photographic corpora.
"""

import numpy as np

from .imagecore import ImageTensor, save_png


def _normalize(field, rng, lo=0.04, hi=0.96):
    """Affinely map a 2-D field into a random sub-interval of [lo, hi]."""
    fmin, fmax = field.min(), field.max()
    if fmax - fmin < 1e-9:
        return np.full_like(field, 0.5)
    unit = (field - fmin) / (fmax - fmin)
    span = rng.uniform(0.65, hi - lo)
    start = rng.uniform(lo, hi - span)
    return start + span * unit


def _power_law_field(rng, size, alpha):
    """Random field whose spectrum falls like 1/f^alpha (photo-like)."""
    noise = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.sqrt(fy**2 + fx**2)
    radius[0, 0] = 1.0
    spectrum = np.fft.fft2(noise) / radius ** (alpha / 2.0)
    spectrum[0, 0] = 0.0
    return np.real(np.fft.ifft2(spectrum))


def _cosine_mix(rng, size):
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    field = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 6))):
        fy, fx = rng.uniform(0.5, 3.5, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        amp = rng.uniform(0.3, 1.0)
        field += amp * np.cos(2 * np.pi * fy * yy + phase[0]) \
                     * np.cos(2 * np.pi * fx * xx + phase[1])
    return field


def _blob_scene(rng, size):
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    gy, gx = rng.uniform(-1, 1, size=2)
    field = gy * yy / size + gx * xx / size
    for _ in range(int(rng.integers(2, 7))):
        cy, cx = rng.uniform(0, size, size=2)
        rad = rng.uniform(size * 0.08, size * 0.45)
        amp = rng.uniform(-1.2, 1.2)
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
    return field


def _shape_scene(rng, size):
    field = _power_law_field(rng, size, alpha=2.5)
    field = (field - field.min()) / (np.ptp(field) + 1e-9)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for _ in range(int(rng.integers(1, 5))):
        value = rng.uniform(0, 1)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, size, size=2)
            hgt = int(rng.integers(size // 8, size // 2))
            wid = int(rng.integers(size // 8, size // 2))
            field[y0:y0 + hgt, x0:x0 + wid] = value
        else:
            cy, cx = rng.uniform(0, size, size=2)
            rad = rng.uniform(size * 0.06, size * 0.3)
            field[(yy - cy) ** 2 + (xx - cx) ** 2 < rad**2] = value
    # Soften edges a touch so the scene stays photographic.
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(field, sigma=size / 128.0 + 0.6)


_FAMILIES = ("field", "cosine", "blobs", "shapes")


def generate_image(rng: np.random.Generator, size: int = 64) -> ImageTensor:
    family = _FAMILIES[int(rng.integers(0, len(_FAMILIES)))]
    if family == "field":
        base = _power_law_field(rng, size, alpha=rng.uniform(1.8, 3.0))
    elif family == "cosine":
        base = _cosine_mix(rng, size)
    elif family == "blobs":
        base = _blob_scene(rng, size)
    else:
        base = _shape_scene(rng, size)
    base = _normalize(base, rng)
    channels = []
    tint_strength = rng.uniform(0.05, 0.35)
    for _ in range(3):
        tint = tint_strength * _power_law_field(rng, size, alpha=2.5)
        tint = tint - tint.mean()
        gain = rng.uniform(0.85, 1.15)
        offset = rng.uniform(-0.08, 0.08)
        channels.append(base * gain + offset + tint)
    return ImageTensor(np.clip(np.stack(channels, axis=2), 0.0, 1.0))


def generate_corpus(out_dir, count: int, size: int = 64, seed: int = 0):
    """Write `count` synthetic PNGs into out_dir; returns the file list."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        img = generate_image(rng, size)
        path = out / f"img{i:05d}.png"
        save_png(img, path)
        paths.append(path)
    return paths
