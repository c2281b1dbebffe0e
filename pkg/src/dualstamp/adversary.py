"""Overwriting-attack and surrogate-model-attack harnesses.

Black-box discipline: the surrogate training functions receive only image
files (plus their own config) and never load the target checkpoint. The
target model appears exclusively in the evaluation half of each harness,
where the defender measures its decoders against the attacker's outputs.
"""

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .imagecore import ImageTensor, load_image
from .nets import ModelBundle, PHashDecoder, UNet, decode_phash, to_torch
from .phash import PHash64, compute_phash
from . import protocol

_VARIANT_DEPTHS = {"unet2": 2, "unet3": 3, "unet4": 4}


@dataclass
class AdversaryConfig:
    variant: str = "unet3"
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1.0e-3
    seed: int = 0
    limit: int = 0            # 0 = use the whole corpus
    min_corpus: int = 40
    image_loss_weight: float = 2.0

    def __post_init__(self):
        if self.variant not in _VARIANT_DEPTHS:
            raise ValueError(f"unknown surrogate variant {self.variant!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


class SurrogateStamp(nn.Module):
    """Attacker-side encoder/decoder pair with the same outer contract as the
    defended pipeline: (image, bits) -> image, image -> bits."""

    def __init__(self, s, n_bits, depth):
        super().__init__()
        self.s = s
        self.n_bits = n_bits
        m = max(s // 2, 1)
        self.proj = nn.Linear(n_bits, m * m)
        self.m = m
        self.unet = UNet(4, 3, base=16, depth=depth)
        nn.init.zeros_(self.unet.outc.weight)
        nn.init.zeros_(self.unet.outc.bias)
        self.decoder = PHashDecoder(s, n_bits=n_bits)

    def encode(self, imgs, bits):
        plane = self.proj(bits).view(-1, 1, self.m, self.m)
        plane = torch.nn.functional.interpolate(
            plane, size=(self.s, self.s), mode="bilinear", align_corners=False)
        res = 0.2 * torch.tanh(self.unet(torch.cat([imgs, plane], dim=1)))
        return torch.clamp(imgs + res, 0.0, 1.0)

    def decode(self, imgs):
        return self.decoder(imgs)


def _list_images(corpus_dir):
    root = Path(corpus_dir)
    return sorted(
        str(p) for p in root.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )


def _load_u8(files, s):
    from .training import load_images_u8

    return load_images_u8(files, s)


def _image_size(path):
    img = load_image(path)
    if img.height != img.width or img.height % 16:
        raise ValueError("corpus images must be square with side multiple of 16")
    return img.height


def _train_surrogate(files, s, n_bits, cfg: AdversaryConfig, bits_for_image):
    """Train an attacker pipeline from image files alone.

    bits_for_image(index, u8_image, rng) supplies the watermark payloads;
    epochs == 0 returns an untrained (identity, zero-residual) surrogate.
    """
    torch.manual_seed(cfg.seed)
    surrogate = SurrogateStamp(s, n_bits, _VARIANT_DEPTHS[cfg.variant])
    if cfg.epochs == 0:
        return surrogate
    data = _load_u8(files, s)
    rng = np.random.default_rng(cfg.seed + 7)
    opt = torch.optim.Adam(surrogate.parameters(), lr=cfg.lr)
    n = len(data)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            imgs = torch.from_numpy(
                data[idx].astype(np.float32).transpose(0, 3, 1, 2) / 255.0)
            bits = np.stack([bits_for_image(i, data[i], rng) for i in idx])
            bits_t = torch.from_numpy(bits.astype(np.float32))
            wm = surrogate.encode(imgs, bits_t)
            logits = surrogate.decode(wm)
            bce = nn.functional.binary_cross_entropy_with_logits(logits, bits_t)
            img_mse = ((wm - imgs) ** 2).mean()
            loss = bce + cfg.image_loss_weight * img_mse
            if not torch.isfinite(loss):
                raise FloatingPointError("surrogate training diverged")
            opt.zero_grad()
            loss.backward()
            opt.step()
    surrogate.eval()
    return surrogate


def _random_bits(n_bits):
    def fn(index, u8_img, rng):
        return rng.integers(0, 2, size=n_bits).astype(np.uint8)

    return fn


def _content_bits_independent(index, u8_img, rng):
    """Attacker's own content hash: SHA3 over raw pixel bytes (no defender
    components involved)."""
    raw = hashlib.sha3_256(u8_img.tobytes()).digest()
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))


def overwrite_attack(target_checkpoint, corpus_dir, cfg: AdversaryConfig) -> dict:
    """Re-embed fresh random 64-bit marks over target-watermarked images and
    measure the target decoder's accuracy on the ORIGINAL perceptual hash.

    If the corpus carries a records.json with embedded ph values those are
    the reference; otherwise the hash computed from the clean watermarked
    image stands in (the embedder preserves it by construction).
    """
    files = _list_images(corpus_dir)
    if cfg.limit:
        files = files[:cfg.limit]
    if len(files) < cfg.min_corpus:
        raise ValueError(f"corpus too small: {len(files)} < {cfg.min_corpus}")
    n_train = int(0.75 * len(files))
    train_files, eval_files = files[:n_train], files[n_train:]
    s = _image_size(files[0])

    surrogate = _train_surrogate(train_files, s, 64, cfg, _random_bits(64))

    records = {}
    record_path = Path(corpus_dir) / "records.json"
    if record_path.exists():
        with open(record_path, encoding="utf-8") as fh:
            records = json.load(fh)

    bundle = ModelBundle.load(target_checkpoint)
    if bundle.hyper.s != s:
        raise ValueError("corpus resolution does not match target checkpoint")
    rng = np.random.default_rng(cfg.seed + 1009)
    bit_accs, exacts, surrogate_recovery = [], [], []
    data = _load_u8(eval_files, s)
    for i, path in enumerate(eval_files):
        w2 = ImageTensor(data[i].astype(np.float64) / 255.0)
        ref_hex = records.get(Path(path).name, {}).get("ph")
        ref = PHash64.from_hex(ref_hex) if ref_hex else compute_phash(w2)
        mark = rng.integers(0, 2, size=64).astype(np.uint8)
        if cfg.epochs == 0:
            overwritten = w2
        else:
            with torch.no_grad():
                wm = surrogate.encode(
                    to_torch(w2), torch.from_numpy(mark.astype(np.float32))[None])
            overwritten = ImageTensor(
                wm[0].cpu().double().numpy().transpose(1, 2, 0)).quantized()
            with torch.no_grad():
                own = torch.sigmoid(surrogate.decode(to_torch(overwritten)))[0]
            surrogate_recovery.append(
                float(((own > 0.5).numpy().astype(np.uint8) == mark).mean()))
        extracted, _ = decode_phash(overwritten, bundle)
        errs = int(np.count_nonzero(extracted.bits != ref.bits))
        bit_accs.append(1.0 - errs / 64.0)
        exacts.append(errs == 0)

    return {
        "harness": "overwrite",
        "config": asdict(cfg),
        "n_train": len(train_files),
        "n_eval": len(eval_files),
        "d1_bit_accuracy_on_original_ph": float(np.mean(bit_accs)),
        "d1_exact_rate_on_original_ph": float(np.mean(exacts)),
        "surrogate_mark_recovery": float(np.mean(surrogate_recovery))
        if surrogate_recovery else None,
    }


def surrogate_attack(target_checkpoint, corpus_dir, cfg: AdversaryConfig,
                     variants=("unet2", "unet3", "unet4")) -> dict:
    """Train look-alike encoder/decoder pairs on natural images with an
    independent content-hash pipeline and measure the target's phase-2
    acceptance of their outputs (plus a genuine-image sanity baseline)."""
    files = _list_images(corpus_dir)
    if cfg.limit:
        files = files[:cfg.limit]
    if len(files) < cfg.min_corpus:
        raise ValueError(f"corpus too small: {len(files)} < {cfg.min_corpus}")
    n_train = int(0.75 * len(files))
    train_files, eval_files = files[:n_train], files[n_train:]

    bundle = ModelBundle.load(target_checkpoint)
    s = bundle.hyper.s
    eval_u8 = _load_u8(eval_files, s)

    variant_rows = []
    for variant in variants:
        vcfg = AdversaryConfig(**{**asdict(cfg), "variant": variant})
        surrogate = _train_surrogate(train_files, s, 256, vcfg,
                                     _content_bits_independent)
        accepted = []
        for i in range(len(eval_u8)):
            cover = ImageTensor(eval_u8[i].astype(np.float64) / 255.0)
            bits = _content_bits_independent(i, eval_u8[i], None)
            with torch.no_grad():
                wm = surrogate.encode(
                    to_torch(cover), torch.from_numpy(bits.astype(np.float32))[None])
            forged = ImageTensor(
                wm[0].cpu().double().numpy().transpose(1, 2, 0)).quantized()
            accepted.append(protocol.auth_check(forged, bundle)["match"])
        variant_rows.append({
            "variant": variant,
            "phase2_acceptance_rate": float(np.mean(accepted)),
            "n_images": len(accepted),
        })

    baseline = []
    for i in range(len(eval_u8)):
        cover = ImageTensor(eval_u8[i].astype(np.float64) / 255.0)
        result = protocol.embed_image(cover, bundle)
        baseline.append(protocol.auth_check(result.w2, bundle)["match"])

    return {
        "harness": "surrogate",
        "config": asdict(cfg),
        "n_train": len(train_files),
        "n_eval": len(eval_files),
        "variants": variant_rows,
        "baseline_phase2_acceptance": float(np.mean(baseline)),
    }
