"""Hybrid non-local + CNN colour image denoising on the CPU."""

from .imagecore import ImageF32, NoiseSpec, add_awgn, cpsnr, load_png, save_png
from .nlm import NlmParams, nlm_denoise
from .bm3d import Bm3dProfile, bm3d_denoise
from .pipeline import HybridDenoiser, Preprocessor, denoise, evaluate

__version__ = "0.1.0"

__all__ = [
    "ImageF32", "NoiseSpec", "add_awgn", "cpsnr", "load_png", "save_png",
    "NlmParams", "nlm_denoise", "Bm3dProfile", "bm3d_denoise",
    "HybridDenoiser", "Preprocessor", "denoise", "evaluate",
]
