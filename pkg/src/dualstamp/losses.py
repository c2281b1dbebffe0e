"""Training objectives: LPIPS, residual regularization, Wasserstein critic
terms, bit-wise BCE, the residual reconstruction loss and the weighted total.

The perceptual loss runs on a VGG-19-style stack with K=5 taps. Calibration
weights default to uniform; the backbone is either externally loaded
pretrained weights or a seeded fixed-random stack (`fixed_random`, the desk
default, since pretrained weights are an environment concern). Channel
widths scale with `width_mult`; pretrained loading requires width_mult=1.
"""

import json
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

BCE_EPS = 1e-7
GRADIENT_PENALTY_COEF = 10.0

# VGG-19 feature stack: channel width per conv, 'M' = maxpool. Taps sit on
# the last ReLU of each of the five blocks.
_VGG19_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                 512, 512, 512, 512, "M", 512, 512, 512, 512]
_TAP_CONV_INDICES = (1, 3, 7, 11, 15)  # relu1_2, relu2_2, relu3_4, relu4_4, relu5_4


@dataclass
class LossWeights:
    """Weight factors for the five loss components of the total objective."""

    l1: float = 1.0
    l2: float = 1.0
    l3: float = 2.0
    l4: float = 2.0
    l5: float = 2.0

    def __post_init__(self):
        vals = self.as_tuple()
        if any(w < 0 for w in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in vals):
            raise ValueError("at least one loss weight must be positive")

    def as_tuple(self):
        return (self.l1, self.l2, self.l3, self.l4, self.l5)


class LpipsModel(nn.Module):
    """VGG-19-style feature extractor with unit-normalized tap differences.

    backbone="fixed_random" builds a deterministic seeded stack (frozen);
    backbone="pretrained" loads conv weights from a torch state dict whose
    keys follow torchvision's vgg19 `features` numbering.
    """

    def __init__(self, backbone="fixed_random", width_mult=0.25, seed=0,
                 weights_path=None):
        super().__init__()
        if backbone not in ("fixed_random", "pretrained"):
            raise ValueError(f"unknown lpips backbone {backbone!r}")
        if backbone == "pretrained":
            if weights_path is None:
                raise ValueError("pretrained backbone needs weights_path")
            width_mult = 1.0
        self.backbone = backbone
        self.width_mult = width_mult
        convs = []
        in_ch = 3
        tap_channels = []
        conv_index = 0
        layers = []
        for item in _VGG19_LAYOUT:
            if item == "M":
                layers.append(("pool", None))
                continue
            out_ch = max(int(round(item * width_mult)), 4)
            conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
            convs.append(conv)
            layers.append(("conv", conv))
            if conv_index in _TAP_CONV_INDICES:
                tap_channels.append(out_ch)
            conv_index += 1
            in_ch = out_ch
        self._layers = layers
        self.convs = nn.ModuleList(convs)
        # Uniform calibration: each tap contributes the mean of its channels.
        self.taus = [torch.ones(c) / c for c in tap_channels]
        if backbone == "fixed_random":
            gen = torch.Generator().manual_seed(seed)
            for conv in self.convs:
                nn.init.kaiming_normal_(conv.weight, generator=gen)
                nn.init.zeros_(conv.bias)
        else:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            self._load_vgg_features(state)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _load_vgg_features(self, state):
        idx = 0
        layer_no = 0
        for item in _VGG19_LAYOUT:
            if item == "M":
                layer_no += 1
                continue
            prefix = f"features.{layer_no}" if f"features.{layer_no}.weight" in state else str(layer_no)
            self.convs[idx].weight.data.copy_(state[f"{prefix}.weight"])
            self.convs[idx].bias.data.copy_(state[f"{prefix}.bias"])
            idx += 1
            layer_no += 2  # conv + relu

    def features(self, x):
        """Tap activations for input in [0,1]; input is shifted to [-1,1]."""
        h = x * 2.0 - 1.0
        taps = []
        conv_index = 0
        for kind, conv in self._layers:
            if kind == "pool":
                h = F.max_pool2d(h, 2)
                continue
            h = F.relu(conv(h))
            if conv_index in _TAP_CONV_INDICES:
                taps.append(h)
            conv_index += 1
        return taps


def _unit_normalize(feat, eps=1e-10):
    norm = torch.sqrt(torch.sum(feat**2, dim=1, keepdim=True) + eps)
    return feat / norm


def lpips(a: torch.Tensor, b: torch.Tensor, model: LpipsModel) -> torch.Tensor:
    """Calibrated, spatially averaged squared distance of unit-normalized
    deep features, averaged over the K tap layers. Zero for identical inputs,
    symmetric in its arguments."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4 or a.shape[1] != 3:
        raise ValueError("lpips expects (N,3,H,W) inputs")
    taps_a = model.features(a)
    taps_b = model.features(b)
    total = 0.0
    for fa, fb, tau in zip(taps_a, taps_b, model.taus):
        diff = (_unit_normalize(fa) - _unit_normalize(fb)) ** 2
        per_channel = diff.mean(dim=(2, 3))
        total = total + (per_channel * tau.to(diff.dtype)).sum(dim=1)
    return (total / len(taps_a)).mean()


def residual_reg(delta: torch.Tensor) -> torch.Tensor:
    """Mean squared magnitude of the embedding-induced change."""
    return (delta**2).mean()


def critic_losses(cover_scores, wm_scores, penalty_terms):
    """Wasserstein critic objective and the generator's encoder term.

    Critic minimizes mean(wm) - mean(cover) + 10 * penalty; the generator
    term is -mean(wm), which falls as watermarked images score more
    cover-like.
    """
    if cover_scores.numel() == 0 or wm_scores.numel() == 0:
        raise ValueError("empty score batch")
    critic_objective = (wm_scores.mean() - cover_scores.mean()
                        + GRADIENT_PENALTY_COEF * penalty_terms)
    generator_term = -wm_scores.mean()
    return critic_objective, generator_term


def gradient_penalty(critic: nn.Module, cover: torch.Tensor,
                     wm: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1,
    evaluated on random interpolates between cover and watermarked batches."""
    n = min(cover.shape[0], wm.shape[0])
    eps = torch.rand(n, 1, 1, 1, generator=gen)
    mix = (eps * cover[:n] + (1 - eps) * wm[:n]).requires_grad_(True)
    scores = critic(mix)
    grads = torch.autograd.grad(scores.sum(), mix, create_graph=True)[0]
    norms = torch.sqrt(torch.sum(grads**2, dim=(1, 2, 3)) + 1e-12)
    return ((norms - 1.0) ** 2).mean()


def bce_bits(probabilities: torch.Tensor, target_bits: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over bits; probabilities clamped away from
    exact 0/1."""
    if probabilities.shape != target_bits.shape:
        raise ValueError(
            f"length mismatch: {tuple(probabilities.shape)} vs {tuple(target_bits.shape)}"
        )
    p = torch.clamp(probabilities, BCE_EPS, 1.0 - BCE_EPS)
    t = target_bits.to(p.dtype)
    return -(t * torch.log(p) + (1 - t) * torch.log1p(-p)).mean()


def remap_residual(residual: torch.Tensor, r_max: float) -> torch.Tensor:
    """Affine map [-r_max, r_max] -> [0,1] so residuals fit LPIPS input range."""
    return torch.clamp((residual + r_max) / (2.0 * r_max), 0.0, 1.0)


def residual_recon_loss(r: torch.Tensor, r_prime: torch.Tensor,
                        model: LpipsModel, r_max: float) -> torch.Tensor:
    """L1 + LPIPS (on remapped residuals) + MSE between embedded and
    reconstructed residuals."""
    if r.shape != r_prime.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(r_prime.shape)}")
    l1 = (r - r_prime).abs().mean()
    mse = ((r - r_prime) ** 2).mean()
    lp = lpips(remap_residual(r, r_max), remap_residual(r_prime, r_max), model)
    return l1 + lp + mse


def total_loss(components, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the five loss components; aborts on non-finite input."""
    if len(components) != 5:
        raise ValueError("expected exactly five loss components")
    for i, c in enumerate(components):
        value = c if isinstance(c, torch.Tensor) else torch.as_tensor(float(c))
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"loss component {i + 1} is non-finite")
    total = 0.0
    for w, c in zip(weights.as_tuple(), components):
        total = total + w * c
    return total


class LossLog:
    """Line-delimited per-step loss records for the plot-data export."""

    FIELDS = ("step", "l_e1", "l_e2", "l_d1", "l_d2", "l_d3", "total")

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def append(self, step, components, total):
        rec = {
            "step": int(step),
            "l_e1": float(components[0]),
            "l_e2": float(components[1]),
            "l_d1": float(components[2]),
            "l_d2": float(components[3]),
            "l_d3": float(components[4]),
            "total": float(total),
        }
        self._fh.write(json.dumps(rec) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_loss_log(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
