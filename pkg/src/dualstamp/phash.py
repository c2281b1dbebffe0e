"""64-bit DCT perceptual hash: the copyright watermark and its verifier reference.

Pipeline: grayscale -> bilinear resize to 32x32 -> orthonormal 2-D DCT ->
upper-left 8x8 block -> compare each coefficient against the mean of all 64
coefficients (DC included). Bit i is 1 iff coefficient i is strictly greater
than the mean, row-major from (0,0). Bit 0 is the most significant bit of
the 16-hex-digit serialization.
"""

import numpy as np

from .imagecore import ImageTensor, dct2d, resize, to_grayscale

HASH_BITS = 64


class PHash64:
    """Ordered 64-bit perceptual hash with lossless hex serialization."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.asarray(bits, dtype=np.uint8)
        if arr.shape != (HASH_BITS,) or not np.all((arr == 0) | (arr == 1)):
            raise ValueError("PHash64 needs exactly 64 binary values")
        self.bits = arr

    def to_hex(self) -> str:
        value = 0
        for b in self.bits:
            value = (value << 1) | int(b)
        return f"{value:016x}"

    @classmethod
    def from_hex(cls, text: str) -> "PHash64":
        if len(text) != 16:
            raise ValueError("PHash64 hex form must be 16 digits")
        value = int(text, 16)
        bits = [(value >> (HASH_BITS - 1 - i)) & 1 for i in range(HASH_BITS)]
        return cls(bits)

    def __eq__(self, other):
        return isinstance(other, PHash64) and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash(self.to_hex())

    def __repr__(self):
        return f"PHash64({self.to_hex()})"


def compute_phash(img: ImageTensor) -> PHash64:
    if img.channels == 3:
        img = to_grayscale(img)
    small = resize(img, 32, 32)
    coeffs = dct2d(small.data[:, :, 0])
    block = coeffs[:8, :8].reshape(-1)
    mean = block.mean()
    # Strict inequality: an exactly-mean coefficient maps to 0, so ties are
    # deterministic (the all-zero image hashes to all zeros).
    return PHash64((block > mean).astype(np.uint8))


def hamming(a: PHash64, b: PHash64) -> int:
    return int(np.count_nonzero(a.bits != b.bits))
