"""Unrolled CNN + dynamic-MLP reconstruction for undersampled multi-coil MRI."""

from .dmlp import DmlpConfig, FcBlockParams, dmlp_backward, dmlp_forward, fc_block_forward
from .fourier import (
    apply_mask,
    apply_mask_complement,
    fft_centered,
    ifft_centered,
    psf_of_mask,
    sense_adjoint,
    sense_forward,
)
from .metrics import psnr, ssim
from .recon import VARIANTS, CascadeConfig, UnrolledNet, df_step, expand_variant
from .sim import make_phantom, make_poisson_mask, make_sensitivities, make_uniform_mask, simulate
from .volume import Axis

__version__ = "0.1.0"

__all__ = [
    "Axis", "CascadeConfig", "DmlpConfig", "FcBlockParams", "UnrolledNet", "VARIANTS",
    "apply_mask", "apply_mask_complement", "df_step", "dmlp_backward", "dmlp_forward", "expand_variant",
    "fc_block_forward", "fft_centered", "ifft_centered", "make_phantom", "make_poisson_mask",
    "make_sensitivities", "make_uniform_mask", "psf_of_mask", "psnr", "sense_adjoint", "sense_forward",
    "simulate", "ssim",
]
