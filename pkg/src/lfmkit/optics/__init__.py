from .config import OpticalConfig
from .geometry import blur_lenslet_count, intermediate_image_position, lf2_locus
from .psf import PsfStack, build_psf_stack, simulate_psf

__all__ = [
    "OpticalConfig",
    "PsfStack",
    "blur_lenslet_count",
    "build_psf_stack",
    "intermediate_image_position",
    "lf2_locus",
    "simulate_psf",
]
