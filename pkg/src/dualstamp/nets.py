"""All trainable networks and the self-describing checkpoint container.

Sizes are parameterized by the pipeline resolution S (must be a multiple of
16). The hash projections map bit vectors to an M x M plane with
M = round(0.64 * S), then bilinearly upsample to S x S.

Networks run in float32. The latent autoencoder additionally exposes a
float64 forward used by the hash path, where bit stability matters more
than speed.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imagecore import ImageTensor

CHECKPOINT_FORMAT_VERSION = 1

_ANCHOR_EPS = 1.0 / 512.0  # keeps logit(I) finite at pixel extremes


@dataclass
class HyperParams:
    """Architecture and pipeline hyperparameters stored in every checkpoint."""

    s: int = 64
    unet_depth: int = 4
    base_channels: int = 32
    latent_dim: int = 64
    levels: int = 16
    r_max: float = 0.2
    center_fraction: float = 0.6
    sigmoid_gain: float = 2.0
    loss_weights: tuple = (1.0, 1.0, 2.0, 2.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.s % 16 != 0 or self.s < 16:
            raise ValueError("pipeline resolution s must be a positive multiple of 16")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    @property
    def m(self):
        """Projection side length; preserves the 256/400 ratio at any scale."""
        return int(round(0.64 * self.s))

    def as_dict(self):
        return dataclasses.asdict(self)


def to_torch(img: ImageTensor) -> torch.Tensor:
    """ImageTensor -> (1, C, H, W) float32 tensor."""
    return torch.from_numpy(img.data.transpose(2, 0, 1)[None]).float()


def from_torch(t: torch.Tensor) -> ImageTensor:
    """(C, H, W) or (1, C, H, W) tensor -> ImageTensor (clamped)."""
    if t.dim() == 4:
        t = t[0]
    return ImageTensor(t.detach().cpu().double().numpy().transpose(1, 2, 0))


def center_mask(s: int, fraction: float) -> torch.Tensor:
    """Binary (1,1,S,S) mask selecting the central `fraction` square.

    Multiplied into the perceptual-hash plane so the robust watermark stays
    away from the borders that cropping removes first.
    """
    mask = torch.zeros(1, 1, s, s)
    half = int(round(s * fraction / 2.0))
    lo = max(s // 2 - half, 0)
    hi = min(s // 2 + half, s)
    mask[:, :, lo:hi, lo:hi] = 1.0
    return mask


class HashProjection(nn.Module):
    """Bits -> M x M linear map -> bilinear upsample -> S x S plane in [0,1]."""

    def __init__(self, n_bits, s):
        super().__init__()
        self.n_bits = n_bits
        self.s = s
        self.m = int(round(0.64 * s))
        self.fc = nn.Linear(n_bits, self.m * self.m)
        # Start the plane mid-range so the clamp does not zero out gradients.
        nn.init.normal_(self.fc.weight, std=0.5 / np.sqrt(n_bits))
        nn.init.constant_(self.fc.bias, 0.5)

    def forward(self, bits):
        if bits.shape[-1] != self.n_bits:
            raise ValueError(f"expected {self.n_bits} bits, got {bits.shape[-1]}")
        plane = self.fc(bits).view(-1, 1, self.m, self.m)
        plane = F.interpolate(plane, size=(self.s, self.s), mode="bilinear",
                              align_corners=False)
        return torch.clamp(plane, 0.0, 1.0)


def _conv(in_ch, out_ch, stride=1):
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)


class UNet(nn.Module):
    """Compact U-Net: stride-2 conv downs, nearest-upsample + conv ups,
    skip connections by concatenation. No normalization layers; ReLU."""

    def __init__(self, in_ch, out_ch, base=32, depth=4):
        super().__init__()
        chans = [base * min(2**i, 8) for i in range(depth + 1)]
        self.depth = depth
        self.inc = _conv(in_ch, chans[0])
        self.downs = nn.ModuleList(
            _conv(chans[i], chans[i + 1], stride=2) for i in range(depth)
        )
        self.mid = _conv(chans[depth], chans[depth])
        self.ups = nn.ModuleList(
            _conv(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(depth))
        )
        self.outc = _conv(chans[0], out_ch)

    def forward(self, x):
        feats = [F.relu(self.inc(x))]
        for down in self.downs:
            feats.append(F.relu(down(feats[-1])))
        y = F.relu(self.mid(feats[-1]))
        for i, up in enumerate(self.ups):
            y = F.interpolate(y, scale_factor=2, mode="nearest")
            y = F.relu(up(torch.cat([y, feats[self.depth - 1 - i]], dim=1)))
        return self.outc(y)


class Encoder1(nn.Module):
    """Embeds the perceptual-hash plane into the cover image.

    The output layer is zero-initialized and the pre-sigmoid logits are
    anchored at logit(I), so the untrained encoder is an exact identity:
    training starts from a perfect-quality image and only perturbs it as
    far as the decoding losses demand.
    """

    def __init__(self, base=32, depth=4):
        super().__init__()
        self.unet = UNet(4, 3, base=base, depth=depth)
        nn.init.zeros_(self.unet.outc.weight)
        nn.init.zeros_(self.unet.outc.bias)

    def forward(self, image, plane):
        x = torch.cat([image, plane], dim=1)
        anchored = torch.clamp(image, _ANCHOR_EPS, 1.0 - _ANCHOR_EPS)
        anchor = torch.log(anchored) - torch.log1p(-anchored)
        return torch.sigmoid(self.unet(x) + anchor)


class Encoder2(nn.Module):
    """Produces the residual carrying the cryptographic hash.

    tanh-scaled output bounds the residual to [-r_max, r_max]; the final
    layer starts at zero so W2 = W1 before any training step.
    """

    def __init__(self, r_max=0.2, base=32, depth=4):
        super().__init__()
        self.r_max = r_max
        self.unet = UNet(4, 3, base=base, depth=depth)
        nn.init.zeros_(self.unet.outc.weight)
        nn.init.zeros_(self.unet.outc.bias)

    def forward(self, w1, plane):
        x = torch.cat([w1, plane], dim=1)
        return self.r_max * torch.tanh(self.unet(x))


class PHashDecoder(nn.Module):
    """Spatial-transformer front end plus a convolutional trunk -> 64 logits."""

    def __init__(self, s, n_bits=64):
        super().__init__()
        self.s = s
        self.loc_conv = nn.Sequential(
            _conv(3, 32, stride=2), nn.ReLU(),
            _conv(32, 64, stride=2), nn.ReLU(),
            _conv(64, 64, stride=2), nn.ReLU(),
        )
        loc_feat = 64 * (s // 8) ** 2
        self.loc_fc = nn.Sequential(nn.Linear(loc_feat, 128), nn.ReLU(),
                                    nn.Linear(128, 6))
        # Identity transform at initialization (standard STN practice).
        nn.init.zeros_(self.loc_fc[-1].weight)
        self.loc_fc[-1].bias.data = torch.tensor([1.0, 0, 0, 0, 1.0, 0])
        self.trunk = nn.Sequential(
            _conv(3, 32, stride=2), nn.ReLU(),
            _conv(32, 64, stride=2), nn.ReLU(),
            _conv(64, 64, stride=2), nn.ReLU(),
            _conv(64, 128, stride=2), nn.ReLU(),
        )
        trunk_feat = 128 * (s // 16) ** 2
        self.head = nn.Sequential(nn.Linear(trunk_feat, 512), nn.ReLU(),
                                  nn.Linear(512, n_bits))

    def transform(self, x):
        theta = self.loc_fc(self.loc_conv(x).flatten(1)).view(-1, 2, 3)
        grid = F.affine_grid(theta, x.shape, align_corners=False)
        return F.grid_sample(x, grid, align_corners=False, padding_mode="border")

    def forward(self, x):
        warped = self.transform(x)
        return self.head(self.trunk(warped).flatten(1))


class ResidualDecoder(nn.Module):
    """Reconstructs the embedded residual from the watermarked image."""

    def __init__(self, r_max=0.2, base=32, depth=4):
        super().__init__()
        self.r_max = r_max
        self.unet = UNet(3, 3, base=base, depth=depth)

    def forward(self, w2):
        return self.r_max * torch.tanh(self.unet(w2))


class CryptoDecoder(nn.Module):
    """Five convolution layers followed by two fully connected -> 256 logits."""

    def __init__(self, s, n_bits=256):
        super().__init__()
        self.trunk = nn.Sequential(
            _conv(3, 32, stride=2), nn.ReLU(),
            _conv(32, 64, stride=2), nn.ReLU(),
            _conv(64, 64, stride=2), nn.ReLU(),
            _conv(64, 128, stride=2), nn.ReLU(),
            _conv(128, 128), nn.ReLU(),
        )
        feat = 128 * (s // 16) ** 2
        self.head = nn.Sequential(nn.Linear(feat, 512), nn.ReLU(),
                                  nn.Linear(512, n_bits))

    def forward(self, residual):
        return self.head(self.trunk(residual).flatten(1))


class Critic(nn.Module):
    """Five-layer convolutional critic; higher score = more cover-like."""

    def __init__(self):
        super().__init__()
        self.trunk = nn.Sequential(
            _conv(3, 32, stride=2), nn.ReLU(),
            _conv(32, 64, stride=2), nn.ReLU(),
            _conv(64, 128, stride=2), nn.ReLU(),
            _conv(128, 128, stride=2), nn.ReLU(),
            _conv(128, 1),
        )

    def forward(self, x):
        return self.trunk(x).mean(dim=(1, 2, 3))


class LatentAutoencoder(nn.Module):
    """Convolutional autoencoder whose latent code feeds the SHA3 pipeline.

    The encoder pools aggressively so the latent responds to content, not to
    sub-quantization pixel noise. Latent normalization is a BatchNorm whose
    running statistics become the fixed affine once pretraining freezes the
    model, followed by a gained sigmoid into (0, 1).
    """

    def __init__(self, s, latent_dim=64, gain=2.0):
        super().__init__()
        self.s = s
        self.latent_dim = latent_dim
        self.gain = gain
        self.enc = nn.Sequential(
            _conv(3, 16, stride=2), nn.ReLU(),
            _conv(16, 32, stride=2), nn.ReLU(),
            _conv(32, 32, stride=2), nn.ReLU(),
            nn.AvgPool2d(2),
        )
        feat = 32 * (s // 16) ** 2
        self.enc_fc = nn.Linear(feat, latent_dim)
        self.norm = nn.BatchNorm1d(latent_dim, affine=False)
        self.dec_fc = nn.Linear(latent_dim, feat)
        self.dec = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"), _conv(32, 32), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), _conv(32, 16), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), _conv(16, 16), nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), _conv(16, 3),
        )

    def encode(self, x):
        z = self.enc_fc(self.enc(x).flatten(1))
        return torch.sigmoid(self.gain * self.norm(z))

    def decode(self, latent):
        h = F.relu(self.dec_fc(latent)).view(-1, 32, self.s // 16, self.s // 16)
        return torch.sigmoid(self.dec(h))

    def forward(self, x):
        latent = self.encode(x)
        return latent, self.decode(latent)

    @torch.no_grad()
    def encode_double(self, x64: torch.Tensor) -> torch.Tensor:
        """Float64 encoder forward for the hash path (frozen statistics)."""
        h = x64.double()
        for layer in self.enc:
            if isinstance(layer, nn.Conv2d):
                h = F.conv2d(h, layer.weight.double(), layer.bias.double(),
                             stride=layer.stride, padding=layer.padding)
            elif isinstance(layer, nn.ReLU):
                h = F.relu(h)
            elif isinstance(layer, nn.AvgPool2d):
                h = F.avg_pool2d(h, layer.kernel_size)
        z = F.linear(h.flatten(1), self.enc_fc.weight.double(),
                     self.enc_fc.bias.double())
        mean = self.norm.running_mean.double()
        var = self.norm.running_var.double()
        z = (z - mean) / torch.sqrt(var + self.norm.eps)
        return torch.sigmoid(self.gain * z)


_MODULE_NAMES = ("fc_ph", "fc_h", "e1", "e2", "d1", "d2", "d3", "critic", "autoencoder")


class ModelBundle:
    """Every network of the pipeline plus its hyperparameters.

    A saved bundle is self-describing: loading needs no external config.
    """

    def __init__(self, hyper: HyperParams):
        self.hyper = hyper
        torch.manual_seed(hyper.seed)
        base, depth = hyper.base_channels, hyper.unet_depth
        self.fc_ph = HashProjection(64, hyper.s)
        self.fc_h = HashProjection(256, hyper.s)
        self.e1 = Encoder1(base=base, depth=depth)
        self.e2 = Encoder2(r_max=hyper.r_max, base=base, depth=depth)
        self.d1 = PHashDecoder(hyper.s)
        self.d2 = ResidualDecoder(r_max=hyper.r_max, base=base, depth=depth)
        self.d3 = CryptoDecoder(hyper.s)
        self.critic = Critic()
        self.autoencoder = LatentAutoencoder(hyper.s, hyper.latent_dim,
                                             hyper.sigmoid_gain)
        self._mask = center_mask(hyper.s, hyper.center_fraction)

    def modules(self):
        return {name: getattr(self, name) for name in _MODULE_NAMES}

    def generator_parameters(self):
        """Parameters updated by the joint step (everything but the critic
        and the frozen autoencoder)."""
        for name in ("fc_ph", "fc_h", "e1", "e2", "d1", "d2", "d3"):
            yield from getattr(self, name).parameters()

    def train_mode(self):
        for mod in self.modules().values():
            mod.train()

    def eval_mode(self):
        for mod in self.modules().values():
            mod.eval()

    @property
    def ph_mask(self):
        return self._mask

    def check_finite(self):
        for name, mod in self.modules().items():
            for pname, p in mod.named_parameters():
                if not torch.isfinite(p).all():
                    raise FloatingPointError(f"non-finite parameter {name}.{pname}")

    def save(self, path):
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "hyper": self.hyper.as_dict(),
            "state": {name: mod.state_dict() for name, mod in self.modules().items()},
        }
        torch.save(payload, path)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        version = payload.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {version}")
        hyper = HyperParams(**payload["hyper"])
        bundle = cls(hyper)
        for name, mod in bundle.modules().items():
            mod.load_state_dict(payload["state"][name])
        bundle.eval_mode()
        bundle.check_finite()
        return bundle


# --- single-image op wrappers used by the protocol and CLI ------------------


def _bits_tensor(bits) -> torch.Tensor:
    return torch.from_numpy(np.asarray(bits, dtype=np.float32))[None]


def project_hash(bits, which: str, bundle: ModelBundle) -> ImageTensor:
    """Project a 64- or 256-bit hash to a single-channel S x S plane."""
    proj = {"ph": bundle.fc_ph, "h": bundle.fc_h}.get(which)
    if proj is None:
        raise ValueError("which must be 'ph' or 'h'")
    with torch.no_grad():
        plane = proj(_bits_tensor(bits))
    return from_torch(plane)


def encode_stage1(img: ImageTensor, ph_plane: ImageTensor, bundle: ModelBundle) -> ImageTensor:
    if (img.height, img.width) != (bundle.hyper.s, bundle.hyper.s) or img.channels != 3:
        raise ValueError("encode_stage1 expects a 3-channel image at pipeline resolution")
    if (ph_plane.height, ph_plane.width) != (bundle.hyper.s, bundle.hyper.s):
        raise ValueError("ph plane resolution mismatch")
    with torch.no_grad():
        w1 = bundle.e1(to_torch(img), to_torch(ph_plane) * bundle.ph_mask)
    return from_torch(w1)


def encode_stage2(w1: ImageTensor, h_plane: ImageTensor, bundle: ModelBundle):
    if (w1.height, w1.width) != (bundle.hyper.s, bundle.hyper.s) or w1.channels != 3:
        raise ValueError("encode_stage2 expects a 3-channel image at pipeline resolution")
    if (h_plane.height, h_plane.width) != (bundle.hyper.s, bundle.hyper.s):
        raise ValueError("h plane resolution mismatch")
    with torch.no_grad():
        r = bundle.e2(to_torch(w1), to_torch(h_plane))
        w2 = torch.clamp(to_torch(w1) + r, 0.0, 1.0)
    residual = r[0].cpu().double().numpy().transpose(1, 2, 0)
    return residual, from_torch(w2)


def decode_phash(img: ImageTensor, bundle: ModelBundle):
    """Returns (PHash64, per-bit probabilities)."""
    from .phash import PHash64

    with torch.no_grad():
        logits = bundle.d1(to_torch(img))
        probs = torch.sigmoid(logits)[0].cpu().double().numpy()
    return PHash64((probs > 0.5).astype(np.uint8)), probs


def decode_residual(img: ImageTensor, bundle: ModelBundle) -> np.ndarray:
    """H x W x 3 float64 residual in [-r_max, r_max].

    Residuals are signed, so they are returned as a plain array rather than
    squeezed into the [0,1] image container.
    """
    with torch.no_grad():
        r = bundle.d2(to_torch(img))
    return r[0].cpu().double().numpy().transpose(1, 2, 0)


def decode_crypto(residual: np.ndarray, bundle: ModelBundle):
    """Returns (CryptoHash256, per-bit probabilities)."""
    from .crypthash import CryptoHash256

    t = torch.from_numpy(np.ascontiguousarray(residual.transpose(2, 0, 1))[None]).float()
    with torch.no_grad():
        logits = bundle.d3(t)
        probs = torch.sigmoid(logits)[0].cpu().double().numpy()
    return CryptoHash256((probs > 0.5).astype(np.uint8)), probs


def critic_score(img: ImageTensor, bundle: ModelBundle) -> float:
    with torch.no_grad():
        return float(bundle.critic(to_torch(img))[0])
