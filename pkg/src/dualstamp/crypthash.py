"""256-bit content/source hash: latent encode -> quantize -> SHA3-256.

The image is snapped to its 8-bit PNG representation, pushed through the
frozen autoencoder's float64 encoder into a sigmoid-normalized latent code,
floor-quantized to a small number of levels, serialized one byte per level
index, and digested with SHA3-256. Quantization absorbs sub-level pixel
noise; content-level edits move latent values across level boundaries and
avalanche through the digest.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .imagecore import ImageTensor
from .nets import ModelBundle

HASH_BITS = 256


class CryptoHash256:
    """256-bit digest with 64-hex-digit lossless serialization."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.shape != (HASH_BITS,) or not np.all((arr == 0) | (arr == 1)):
            raise ValueError("CryptoHash256 needs exactly 256 binary values")
        self.bits = arr

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CryptoHash256":
        if len(raw) != 32:
            raise ValueError("expected 32 bytes")
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
        return cls(bits)

    def to_hex(self) -> str:
        return np.packbits(self.bits).tobytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> "CryptoHash256":
        if len(text) != 64:
            raise ValueError("CryptoHash256 hex form must be 64 digits")
        return cls.from_bytes(bytes.fromhex(text))

    def __eq__(self, other):
        return isinstance(other, CryptoHash256) and bool(
            np.array_equal(self.bits, other.bits)
        )

    def __hash__(self):
        return hash(self.to_hex())

    def __repr__(self):
        return f"CryptoHash256({self.to_hex()})"


@dataclass
class LatentCode:
    """Sigmoid-normalized latent values in (0,1) plus the level count."""

    values: np.ndarray
    levels: int = 16

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


def encode_latent(img: ImageTensor, bundle: ModelBundle) -> LatentCode:
    """Deterministic float64 forward pass of the frozen autoencoder encoder.

    The image is 8-bit-quantized first so sender and verifier hash exactly
    the pixel data a PNG round-trip would produce.
    """
    s = bundle.hyper.s
    if (img.height, img.width) != (s, s) or img.channels != 3:
        raise ValueError(
            f"autoencoder was trained at {s}x{s}x3, got "
            f"{img.height}x{img.width}x{img.channels}"
        )
    data = img.quantized().data.transpose(2, 0, 1)[None]
    x = torch.from_numpy(np.ascontiguousarray(data))
    values = bundle.autoencoder.encode_double(x)[0].numpy()
    return LatentCode(values=values, levels=bundle.hyper.levels)


def quantize(code: LatentCode) -> bytes:
    """One byte per latent element holding floor(value * levels), clamped."""
    values = code.values
    if not np.all(np.isfinite(values)):
        raise ValueError("latent contains non-finite values")
    idx = np.floor(values * code.levels).astype(np.int64)
    idx = np.clip(idx, 0, code.levels - 1)
    return idx.astype(np.uint8).tobytes()


def digest(quantized: bytes) -> CryptoHash256:
    """SHA3-256 (FIPS 202) of the quantized byte sequence."""
    return CryptoHash256.from_bytes(hashlib.sha3_256(quantized).digest())


def content_hash(img: ImageTensor, bundle: ModelBundle) -> CryptoHash256:
    return digest(quantize(encode_latent(img, bundle)))


def quantized_levels(img: ImageTensor, bundle: ModelBundle) -> np.ndarray:
    """Level indices before hashing; handy for diagnosing near-boundary codes."""
    code = encode_latent(img, bundle)
    return np.frombuffer(quantize(code), dtype=np.uint8).copy()
