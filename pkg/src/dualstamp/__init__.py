"""Dual invisible watermarking toolkit.

Phase 1 (robust, copyright): a 64-bit DCT perceptual hash embedded by E1 and
recovered by a spatial-transformer decoder. Phase 2 (fragile,
authentication): a 256-bit SHA3 digest of a quantized learned latent,
embedded as an additive residual by E2 and verified by reconstructing the
residual (D2) and decoding the digest (D3).
"""

from .crypthash import CryptoHash256, content_hash, digest, encode_latent, quantize
from .imagecore import ImageTensor, QualityMetrics, compute_metrics, dct2d, \
    load_image, resize, save_png, to_grayscale
from .nets import HyperParams, ModelBundle
from .phash import PHash64, compute_phash, hamming
from .protocol import VerificationReport, embed, verify, verify_authentication, \
    verify_copyright
from .training import SplitManifest, TrainConfig, evaluate, ingest, train

__all__ = [
    "CryptoHash256", "content_hash", "digest", "encode_latent", "quantize",
    "ImageTensor", "QualityMetrics", "compute_metrics", "dct2d", "load_image",
    "resize", "save_png", "to_grayscale", "HyperParams", "ModelBundle",
    "PHash64", "compute_phash", "hamming", "VerificationReport", "embed",
    "verify", "verify_authentication", "verify_copyright", "SplitManifest",
    "TrainConfig", "evaluate", "ingest", "train",
]

__version__ = "0.1.0"
