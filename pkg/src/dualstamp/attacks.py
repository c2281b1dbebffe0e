"""Content-preserving manipulation suite: offline evaluation attacks plus
differentiable in-loop counterparts for training the robust decoder branch.

Pixel-size parameters (crop sizes, edge-crop targets) are defined at the
reference resolution 400 and scaled by S/400 at application time.

The frozen JPEG codec is Pillow with quality=Q, subsampling=0 (4:4:4) and
optimize off; the differentiable approximation uses the same 4:4:4 layout
with annex-K quantization tables and a cubic soft-round.
"""

import io
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .imagecore import ImageTensor, resize

REFERENCE_SIZE = 400

KINDS = ("jpeg", "gaussian_blur", "salt_pepper", "gaussian_noise", "poisson_noise",
         "random_crop", "edge_crop", "flip", "rotate", "brightness", "contrast",
         "identity")

_PARAM_RANGES = {
    "jpeg": ("q", 1, 95),
    "gaussian_blur": ("window", 3, 15),
    "salt_pepper": ("density", 0.0, 0.5),
    "gaussian_noise": ("sigma", 0.0, 0.5),
    "poisson_noise": ("peak", 1.0, 1000.0),
    "random_crop": ("size", 1, REFERENCE_SIZE),
    "edge_crop": ("target", 1, REFERENCE_SIZE),
    "rotate": ("degrees", -45.0, 45.0),
    "brightness": ("delta", -0.5, 0.5),
    "contrast": ("factor", 0.5, 2.0),
}


@dataclass
class AttackSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "identity":
            return
        if self.kind == "flip":
            axis = self.params.get("axis", "h")
            if axis not in ("h", "v"):
                raise ValueError("flip axis must be 'h' or 'v'")
            self.params["axis"] = axis
            return
        name, lo, hi = _PARAM_RANGES[self.kind]
        if name not in self.params:
            raise ValueError(f"{self.kind} requires parameter {name!r}")
        value = self.params[name]
        if not (lo <= value <= hi):
            raise ValueError(f"{self.kind}.{name}={value} outside [{lo}, {hi}]")
        if self.kind == "gaussian_blur" and int(value) % 2 == 0:
            raise ValueError("blur window must be odd")

    def label(self):
        if self.kind == "identity":
            return "identity"
        if self.kind == "flip":
            return f"flip_{self.params['axis']}"
        name = _PARAM_RANGES[self.kind][0]
        value = self.params[name]
        if isinstance(value, float):
            return f"{self.kind}_{name}={value:g}"
        return f"{self.kind}_{name}={value}"


def _scaled_pixels(ref_size, s):
    return max(int(round(ref_size * s / REFERENCE_SIZE)), 1)


def _blur_kernel(window):
    # OpenCV's sigma-from-window convention.
    sigma = 0.3 * ((window - 1) * 0.5 - 1) + 0.8
    half = (window - 1) / 2.0
    coords = np.arange(window, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def apply(spec: AttackSpec, img: ImageTensor, rng_seed: int) -> ImageTensor:
    """Apply the manipulation; all randomness is fixed by rng_seed."""
    rng = np.random.default_rng(rng_seed)
    d = img.data
    s = min(img.height, img.width)
    kind = spec.kind

    if kind == "identity":
        return ImageTensor(d)

    if kind == "jpeg":
        arr = img.to_uint8()
        pil = Image.fromarray(arr[:, :, 0], "L") if arr.shape[2] == 1 else Image.fromarray(arr, "RGB")
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=int(spec.params["q"]),
                 subsampling=0, optimize=False)
        buf.seek(0)
        with Image.open(buf) as out:
            dec = np.asarray(out, dtype=np.float64) / 255.0
        return ImageTensor(dec)

    if kind == "gaussian_blur":
        k = _blur_kernel(int(spec.params["window"]))
        out = np.stack(
            [ndimage.convolve(d[:, :, c], k, mode="nearest") for c in range(img.channels)],
            axis=2,
        )
        return ImageTensor(out)

    if kind == "salt_pepper":
        density = float(spec.params["density"])
        u = rng.random((img.height, img.width))
        out = d.copy()
        out[u < density / 2.0] = 0.0
        out[u > 1.0 - density / 2.0] = 1.0
        return ImageTensor(out)

    if kind == "gaussian_noise":
        sigma = float(spec.params["sigma"])
        return ImageTensor(d + rng.normal(0.0, sigma, d.shape))

    if kind == "poisson_noise":
        peak = float(spec.params["peak"])
        return ImageTensor(rng.poisson(d * peak) / peak)

    if kind == "random_crop":
        size = _scaled_pixels(int(spec.params["size"]), s)
        size = min(size, img.height, img.width)
        top = int(rng.integers(0, img.height - size + 1))
        left = int(rng.integers(0, img.width - size + 1))
        out = d.copy()
        out[top:top + size, left:left + size, :] = 0.5
        return ImageTensor(out)

    if kind == "edge_crop":
        target = _scaled_pixels(int(spec.params["target"]), s)
        target = min(target, img.height, img.width)
        top = (img.height - target) // 2
        left = (img.width - target) // 2
        cropped = ImageTensor(d[top:top + target, left:left + target, :])
        return resize(cropped, img.height, img.width)

    if kind == "flip":
        axis = 1 if spec.params["axis"] == "h" else 0
        return ImageTensor(np.flip(d, axis=axis).copy())

    if kind == "rotate":
        deg = float(spec.params["degrees"])
        out = np.stack(
            [ndimage.rotate(d[:, :, c], deg, reshape=False, order=1, mode="nearest")
             for c in range(img.channels)],
            axis=2,
        )
        return ImageTensor(out)

    if kind == "brightness":
        return ImageTensor(d + float(spec.params["delta"]))

    if kind == "contrast":
        return ImageTensor((d - 0.5) * float(spec.params["factor"]) + 0.5)

    raise AssertionError(f"unhandled kind {kind}")


# --- differentiable counterparts --------------------------------------------

# Annex-K base quantization tables.
_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)
_JPEG_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def _dct8_matrix():
    n = 8
    mat = np.zeros((n, n))
    for k in range(n):
        c = np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)
        mat[k] = c * np.cos((2 * np.arange(n) + 1) * k * np.pi / (2 * n))
    return torch.from_numpy(mat).float()


_DCT8 = _dct8_matrix()

_RGB2YCBCR = torch.tensor([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
]).float()
_YCBCR2RGB = torch.tensor([
    [1.0, 0.0, 1.402],
    [1.0, -0.344136, -0.714136],
    [1.0, 1.772, 0.0],
]).float()


def _quality_scale(q):
    q = max(1, min(int(q), 99))
    factor = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return factor / 100.0


def _soft_round(x):
    return torch.round(x) + (x - torch.round(x)) ** 3


def _blockify(channel):
    # (N,H,W) -> (N, nblocks, 8, 8)
    n, h, w = channel.shape
    x = channel.view(n, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)
    return x.reshape(n, -1, 8, 8), h, w


def _unblockify(blocks, h, w):
    n = blocks.shape[0]
    x = blocks.view(n, h // 8, w // 8, 8, 8).permute(0, 1, 3, 2, 4)
    return x.reshape(n, h, w)


def differentiable_jpeg(x: torch.Tensor, q: int) -> torch.Tensor:
    """4:4:4 DCT-quantization JPEG approximation with soft rounding."""
    if x.shape[-1] % 8 or x.shape[-2] % 8:
        raise ValueError("differentiable_jpeg needs dimensions divisible by 8")
    scale = _quality_scale(q)
    luma_t = torch.clamp(torch.round(torch.from_numpy(_JPEG_LUMA).float() * scale), 1, 255)
    chroma_t = torch.clamp(torch.round(torch.from_numpy(_JPEG_CHROMA).float() * scale), 1, 255)
    # Chroma comes out centered at 0, so the standard +128 chroma offset and
    # the -128 DCT level shift cancel; only luma needs the shift.
    shift = torch.tensor([128.0, 0.0, 0.0]).view(1, 3, 1, 1)
    ycc = torch.einsum("ij,njhw->nihw", _RGB2YCBCR, x * 255.0) - shift
    out_channels = []
    for ch in range(3):
        table = luma_t if ch == 0 else chroma_t
        blocks, h, w = _blockify(ycc[:, ch])
        coeffs = torch.einsum("ij,nbjk,lk->nbil", _DCT8, blocks, _DCT8)
        quantized = _soft_round(coeffs / table) * table
        rec = torch.einsum("ji,nbjk,kl->nbil", _DCT8, quantized, _DCT8)
        out_channels.append(_unblockify(rec, h, w))
    ycc_rec = torch.stack(out_channels, dim=1) + shift
    rgb = torch.einsum("ij,njhw->nihw", _YCBCR2RGB, ycc_rec)
    return torch.clamp(rgb / 255.0, 0.0, 1.0)


def apply_differentiable(spec: AttackSpec, img: torch.Tensor,
                         gen: torch.Generator | None = None) -> torch.Tensor:
    """Gradient-carrying counterpart of `apply` on (N,3,H,W) tensors.

    Placement masks and noise draws are detached (reparameterized), so the
    gradient w.r.t. the image is exact for additive kinds and straight-through
    for substitution kinds. True entropy coding has no differentiable form;
    the JPEG path is the DCT-quantization approximation.
    """
    kind = spec.kind
    n, _, h, w = img.shape
    s = min(h, w)
    if gen is None:
        gen = torch.Generator().manual_seed(0)

    if kind == "identity":
        return img

    if kind == "jpeg":
        return differentiable_jpeg(img, int(spec.params["q"]))

    if kind == "gaussian_blur":
        window = int(spec.params["window"])
        k = torch.from_numpy(_blur_kernel(window)).float()
        kernel = k.expand(3, 1, window, window)
        pad = window // 2
        padded = F.pad(img, (pad, pad, pad, pad), mode="replicate")
        return F.conv2d(padded, kernel, groups=3)

    if kind == "salt_pepper":
        density = float(spec.params["density"])
        u = torch.rand(n, 1, h, w, generator=gen)
        salt = (u > 1.0 - density / 2.0).float()
        pepper = (u < density / 2.0).float()
        keep = 1.0 - salt - pepper
        return img * keep + salt

    if kind == "gaussian_noise":
        sigma = float(spec.params["sigma"])
        noise = torch.randn(img.shape, generator=gen) * sigma
        return torch.clamp(img + noise, 0.0, 1.0)

    if kind == "poisson_noise":
        peak = float(spec.params["peak"])
        std = torch.sqrt(torch.clamp(img, min=0.0) / peak)
        noise = torch.randn(img.shape, generator=gen) * std.detach()
        return torch.clamp(img + noise, 0.0, 1.0)

    if kind == "random_crop":
        size = min(_scaled_pixels(int(spec.params["size"]), s), h, w)
        top = int(torch.randint(0, h - size + 1, (1,), generator=gen))
        left = int(torch.randint(0, w - size + 1, (1,), generator=gen))
        mask = torch.ones(1, 1, h, w)
        mask[:, :, top:top + size, left:left + size] = 0.0
        return img * mask + 0.5 * (1.0 - mask)

    if kind == "edge_crop":
        target = min(_scaled_pixels(int(spec.params["target"]), s), h, w)
        top = (h - target) // 2
        left = (w - target) // 2
        cropped = img[:, :, top:top + target, left:left + target]
        return F.interpolate(cropped, size=(h, w), mode="bilinear", align_corners=False)

    if kind == "flip":
        dim = 3 if spec.params["axis"] == "h" else 2
        return torch.flip(img, dims=(dim,))

    if kind == "rotate":
        rad = float(spec.params["degrees"]) * np.pi / 180.0
        cos, sin = np.cos(rad), np.sin(rad)
        theta = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]]).float()
        theta = theta[None].expand(n, 2, 3)
        grid = F.affine_grid(theta, img.shape, align_corners=False)
        return F.grid_sample(img, grid, align_corners=False, padding_mode="border")

    if kind == "brightness":
        return torch.clamp(img + float(spec.params["delta"]), 0.0, 1.0)

    if kind == "contrast":
        return torch.clamp((img - 0.5) * float(spec.params["factor"]) + 0.5, 0.0, 1.0)

    raise AssertionError(f"unhandled kind {kind}")


# Training menu: identity with probability 0.5, else uniform over the suite.
_MENU = [
    ("jpeg", "q", (10, 30, 50)),
    ("gaussian_blur", "window", (3, 5, 7)),
    ("salt_pepper", "density", (0.01, 0.02, 0.05)),
    ("gaussian_noise", "sigma", (0.02, 0.05)),
    ("poisson_noise", "peak", (120.0, 255.0)),
    ("random_crop", "size", (20, 40, 60)),
    ("edge_crop", "target", (390, 375)),
    ("flip", "axis", ("h", "v")),
    ("rotate", "degrees", None),      # uniform in [-15, 15]
    ("brightness", "delta", None),    # uniform in [-0.2, 0.2]
    ("contrast", "factor", None),     # uniform in [0.8, 1.2]
]


def sample_training_attack(rng: np.random.Generator) -> AttackSpec:
    """Draw identity with probability 0.5, else a uniform kind with uniform
    parameters; fully determined by the generator state."""
    if rng.random() < 0.5:
        return AttackSpec("identity")
    kind, name, menu = _MENU[int(rng.integers(0, len(_MENU)))]
    if menu is not None:
        value = menu[int(rng.integers(0, len(menu)))]
    elif kind == "rotate":
        value = float(rng.uniform(-15.0, 15.0))
    elif kind == "brightness":
        value = float(rng.uniform(-0.2, 0.2))
    else:
        value = float(rng.uniform(0.8, 1.2))
    return AttackSpec(kind, {name: value})


def default_evaluation_suite() -> list:
    """The Table-III style evaluation rows, at reference-scale parameters."""
    specs = [AttackSpec("identity")]
    specs += [AttackSpec("jpeg", {"q": q}) for q in (10, 30, 50)]
    specs += [AttackSpec("gaussian_blur", {"window": w}) for w in (3, 5, 7)]
    specs.append(AttackSpec("salt_pepper", {"density": 0.02}))
    specs.append(AttackSpec("gaussian_noise", {"sigma": 0.05}))
    specs.append(AttackSpec("poisson_noise", {"peak": 255.0}))
    specs += [AttackSpec("random_crop", {"size": c}) for c in (20, 40, 60)]
    specs += [AttackSpec("edge_crop", {"target": t}) for t in (390, 375)]
    return specs
