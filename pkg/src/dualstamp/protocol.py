"""Sender/receiver contract: embed both watermarks, verify each phase.

Verification needs only the received file and the checkpoint: phase 1
compares the decoded perceptual hash against the hash computed from the
received pixels; phase 2 reconstructs the residual, decodes the embedded
content hash from it, and compares against the content hash of the
residual-subtracted image. The two phases share no state and may run in
either order or alone.

The watermarked image must travel losslessly (PNG): phase 2 compares
256-bit digests of 8-bit pixel data, which any lossy re-encode of the
carrier will flip.
"""

import datetime
import hashlib
import io
import json
from dataclasses import dataclass

import numpy as np
import torch

from .crypthash import CryptoHash256, content_hash
from .imagecore import ImageTensor, compute_metrics, load_image, resize, save_png
from .nets import ModelBundle, from_torch, to_torch
from .phash import PHash64, compute_phash, hamming

DEFAULT_HAMMING_THRESHOLD = 4


def phash_from_hex(text) -> PHash64:
    return PHash64.from_hex(text)


def checkpoint_fingerprint(bundle: ModelBundle) -> str:
    """Short stable id of all parameters; identifies the verifying model."""
    digest = hashlib.sha3_256()
    for name, mod in sorted(bundle.modules().items()):
        for pname, tensor in sorted(mod.state_dict().items()):
            digest.update(name.encode())
            digest.update(pname.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()[:16]


@dataclass
class EmbedResult:
    w1: ImageTensor
    w2: ImageTensor
    residual: np.ndarray
    ph: PHash64
    h: CryptoHash256


def _prepare_cover(img: ImageTensor, s: int) -> ImageTensor:
    if img.channels == 1:
        img = ImageTensor(np.repeat(img.data, 3, axis=2))
    if (img.height, img.width) != (s, s):
        img = resize(img, s, s)
    return img.quantized()


def embed_image(cover: ImageTensor, bundle: ModelBundle) -> EmbedResult:
    """Full two-stage embedding on an already-prepared S x S cover image.

    Stage outputs are snapped to the 8-bit grid the PNG serialization uses,
    so the hashes computed here are exactly the ones a verifier recomputes.
    """
    s = bundle.hyper.s
    if (cover.height, cover.width) != (s, s) or cover.channels != 3:
        raise ValueError("cover must be 3-channel at pipeline resolution")
    ph = compute_phash(cover)
    with torch.no_grad():
        bits_ph = torch.from_numpy(ph.bits.astype(np.float32))[None]
        plane_ph = bundle.fc_ph(bits_ph) * bundle.ph_mask
        w1_t = bundle.e1(to_torch(cover), plane_ph)
        w1 = from_torch(w1_t).quantized()
        h = content_hash(w1, bundle)
        bits_h = torch.from_numpy(h.bits.astype(np.float32))[None]
        plane_h = bundle.fc_h(bits_h)
        r_t = bundle.e2(to_torch(w1), plane_h)
        w2_t = torch.clamp(to_torch(w1) + r_t, 0.0, 1.0)
        w2 = from_torch(w2_t).quantized()
    residual = r_t[0].cpu().double().numpy().transpose(1, 2, 0)
    return EmbedResult(w1=w1, w2=w2, residual=residual, ph=ph, h=h)


def embed(cover: ImageTensor, bundle: ModelBundle):
    """Embed and serialize: returns (png_bytes, side_record).

    The side record is informational only; verification never needs it.
    """
    prepared = _prepare_cover(cover, bundle.hyper.s)
    result = embed_image(prepared, bundle)
    buf = io.BytesIO()
    save_png(result.w2, buf)
    record = {
        "ph": result.ph.to_hex(),
        "h": result.h.to_hex(),
        "checkpoint_id": checkpoint_fingerprint(bundle),
        "quality": compute_metrics(prepared, result.w2).as_dict(),
    }
    return buf.getvalue(), record


def copyright_check(img: ImageTensor, bundle: ModelBundle,
                    threshold=DEFAULT_HAMMING_THRESHOLD) -> dict:
    """Phase 1 on in-memory pixels: decoded watermark vs computed hash."""
    from .nets import decode_phash

    ph_prime = compute_phash(img)
    extracted, _probs = decode_phash(img, bundle)
    dist = hamming(extracted, ph_prime)
    return {
        "extracted_ph": extracted.to_hex(),
        "computed_ph": ph_prime.to_hex(),
        "hamming": dist,
        "exact_match": dist == 0,
        "threshold_match": dist <= threshold,
    }


def auth_check(img: ImageTensor, bundle: ModelBundle) -> dict:
    """Phase 2 on in-memory pixels: full 256-bit digest equality."""
    from .nets import decode_crypto, decode_residual

    r_prime = decode_residual(img, bundle)
    extracted, _probs = decode_crypto(r_prime, bundle)
    restored = ImageTensor(np.clip(img.data - r_prime, 0.0, 1.0))
    h_prime = content_hash(restored, bundle)
    return {
        "extracted_h": extracted.to_hex(),
        "computed_h": h_prime.to_hex(),
        "match": extracted == h_prime,
    }


@dataclass
class VerificationReport:
    copyright: dict | None
    authentication: dict | None
    quality: dict | None
    checkpoint_id: str
    timestamp: str

    def passed(self, mode="both") -> bool:
        def section_ok(section, key):
            return section is not None and bool(section.get(key, False))

        if mode == "copyright":
            return section_ok(self.copyright, "threshold_match")
        if mode == "auth":
            return section_ok(self.authentication, "match")
        cop = self.copyright is None or self.copyright.get("threshold_match", False)
        auth = self.authentication is None or self.authentication.get("match", False)
        return bool(cop and auth)

    def to_json(self) -> str:
        return json.dumps({
            "copyright": self.copyright,
            "authentication": self.authentication,
            "quality": self.quality,
            "checkpoint_id": self.checkpoint_id,
            "timestamp": self.timestamp,
        }, indent=1)

    @classmethod
    def from_json(cls, text) -> "VerificationReport":
        raw = json.loads(text)
        return cls(copyright=raw["copyright"], authentication=raw["authentication"],
                   quality=raw["quality"], checkpoint_id=raw["checkpoint_id"],
                   timestamp=raw["timestamp"])


def _load_received(path_or_img, s):
    if isinstance(path_or_img, ImageTensor):
        img = path_or_img
    else:
        img = load_image(path_or_img)
    if img.channels == 1:
        img = ImageTensor(np.repeat(img.data, 3, axis=2))
    if (img.height, img.width) != (s, s):
        img = resize(img, s, s)
    return img.quantized()


def verify_copyright(w2_file, bundle: ModelBundle,
                     hamming_threshold=DEFAULT_HAMMING_THRESHOLD) -> dict:
    """Phase 1 for a received file. Decode failures are reported, not thrown."""
    try:
        img = _load_received(w2_file, bundle.hyper.s)
    except Exception as exc:
        return {"error": f"decode failure: {exc}"}
    return copyright_check(img, bundle, threshold=hamming_threshold)


def verify_authentication(w2_file, bundle: ModelBundle) -> dict:
    """Phase 2 for a received file. Decode failures are reported, not thrown."""
    try:
        img = _load_received(w2_file, bundle.hyper.s)
    except Exception as exc:
        return {"error": f"decode failure: {exc}"}
    return auth_check(img, bundle)


def verify(w2_file, bundle: ModelBundle, mode="both",
           hamming_threshold=DEFAULT_HAMMING_THRESHOLD,
           original: ImageTensor | None = None) -> VerificationReport:
    """Run the requested phases and assemble the report document."""
    cop = verify_copyright(w2_file, bundle, hamming_threshold) \
        if mode in ("both", "copyright") else None
    auth = verify_authentication(w2_file, bundle) if mode in ("both", "auth") else None
    quality = None
    if original is not None:
        try:
            received = _load_received(w2_file, bundle.hyper.s)
            prepared = _prepare_cover(original, bundle.hyper.s)
            quality = compute_metrics(prepared, received).as_dict()
        except Exception as exc:
            quality = {"error": str(exc)}
    return VerificationReport(
        copyright=cop,
        authentication=auth,
        quality=quality,
        checkpoint_id=checkpoint_fingerprint(bundle),
        timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat(),
    )
