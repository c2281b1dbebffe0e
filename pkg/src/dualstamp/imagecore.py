"""Image containers, color conversion, resizing, 2-D DCT and quality metrics.

Everything in this module is pure numpy in float64: the hash pipeline needs
bit-stable arithmetic, so no library resize/DCT conventions are allowed to
leak in. The one exception is scipy's DCT, which matches the orthonormal
DCT-II exactly and is verified against a naive double-sum oracle in tests.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.fft import dctn, idctn

# Identical images report this PSNR instead of +inf so reports serialize.
PSNR_CAP_DB = 99.0

# ITU-R BT.601 luma weights, frozen: the perceptual hash depends on them.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


class ImageShapeError(ValueError):
    """Raised when an operation receives an image of the wrong shape."""


class ImageTensor:
    """H x W x C image with float64 values clamped to [0, 1].

    Channels must be 1 (grayscale) or 3 (RGB). Construction always copies,
    clamps and checks finiteness, so any ImageTensor is a valid carrier for
    the rest of the pipeline.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ImageShapeError(f"expected HxWx{{1,3}} array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        self.data = np.clip(arr, 0.0, 1.0)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def same_shape(self, other):
        return self.data.shape == other.data.shape

    def quantized(self):
        """Return a copy snapped to the 8-bit grid (the PNG representation)."""
        return ImageTensor(np.round(self.data * 255.0) / 255.0)

    def to_uint8(self):
        return np.round(self.data * 255.0).astype(np.uint8)

    def __repr__(self):
        return f"ImageTensor({self.height}x{self.width}x{self.channels})"


@dataclass
class QualityMetrics:
    psnr: float
    ssim: float
    mse: float

    def as_dict(self):
        return {"psnr": self.psnr, "ssim": self.ssim, "mse": self.mse}


def to_grayscale(img: ImageTensor) -> ImageTensor:
    """BT.601 luma conversion. Rejects grayscale input to catch pipeline misuse."""
    if img.channels != 3:
        raise ImageShapeError("to_grayscale requires a 3-channel image")
    gray = img.data @ _LUMA_WEIGHTS
    return ImageTensor(gray[:, :, None])


def resize(img: ImageTensor, out_h: int, out_w: int) -> ImageTensor:
    """Bilinear resize with half-pixel-centered coordinate mapping.

    Frozen convention: source coordinate of output pixel i is
    (i + 0.5) * in/out - 0.5, clamped to the valid range. This is the
    standard convention of most image libraries, written out explicitly so
    the perceptual hash never depends on a third-party kernel choice.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    in_h, in_w = img.height, img.width
    if (in_h, in_w) == (out_h, out_w):
        return ImageTensor(img.data)

    def axis_coords(n_in, n_out):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1.0)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(in_h, out_h)
    x0, x1, fx = axis_coords(in_w, out_w)
    d = img.data
    top = d[y0][:, x0] * (1 - fx)[None, :, None] + d[y0][:, x1] * fx[None, :, None]
    bot = d[y1][:, x0] * (1 - fx)[None, :, None] + d[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return ImageTensor(out)


def dct2d(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of a square matrix.

    Coefficient [0,0] equals N * mean(block) under this scaling.
    """
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise ValueError(f"dct2d requires a square matrix, got shape {block.shape}")
    return dctn(block, type=2, norm="ortho")


def idct2d(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of dct2d (orthonormal DCT-III)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or coeffs.shape[0] != coeffs.shape[1]:
        raise ValueError(f"idct2d requires a square matrix, got shape {coeffs.shape}")
    return idctn(coeffs, type=2, norm="ortho")


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(a, b, window):
    """SSIM map for one channel via valid-mode windowed statistics."""
    from scipy.signal import fftconvolve

    def filt(x):
        return fftconvolve(x, window, mode="valid")

    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return num / den


def compute_metrics(a: ImageTensor, b: ImageTensor) -> QualityMetrics:
    """MSE over all elements, PSNR against peak 1.0 and mean SSIM over channels.

    SSIM uses an 11x11 Gaussian window (sigma=1.5) with the standard
    stabilizing constants C1=(0.01)^2, C2=(0.03)^2 for unit dynamic range.
    """
    if not a.same_shape(b):
        raise ImageShapeError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        psnr = PSNR_CAP_DB
    else:
        psnr = float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))
    window = _gaussian_window()
    if a.height < 11 or a.width < 11:
        # Tiny images: fall back to a single global window of matching size.
        window = _gaussian_window(size=min(a.height, a.width))
    ssim_vals = [
        float(np.mean(_ssim_channel(a.data[:, :, c], b.data[:, :, c], window)))
        for c in range(a.channels)
    ]
    return QualityMetrics(psnr=psnr, ssim=float(np.mean(ssim_vals)), mse=mse)


def load_image(path) -> ImageTensor:
    """Decode a PNG/JPEG file into an ImageTensor (RGB or grayscale)."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return ImageTensor(arr)


def save_png(img: ImageTensor, path):
    """Write the image losslessly as 8-bit PNG.

    PNG is the only output format: the authentication phase compares hashes
    of 8-bit pixel data bit-for-bit, which a lossy re-encode would destroy.
    """
    arr = img.to_uint8()
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")
