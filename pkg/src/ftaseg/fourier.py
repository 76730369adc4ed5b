"""Spectral decomposition of 2D slices and low-frequency amplitude exchange.

A slice pair is augmented by blending the amplitude spectra inside a
centered low-frequency region while each image keeps its own phase, then
transforming back. Spectra use the center-shifted layout with the DC bin at
(H//2, W//2).

Two blend modes are provided:

* ``paper-literal``:  A_w' = (1-l) * A_w * (1-M) + l * A_u * M
* ``standard-fda``:   A_w' = A_w * (1-M) + ((1-l) * A_w + l * A_u) * M

``paper-literal`` attenuates the unmasked band by (1-l) and so is not the
identity at l=0; ``standard-fda`` only touches the masked center and reduces
to the identity at l=0. Both compute the mirrored blend for the second image
in the same call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .preprocess import Slice2D

MODE_PAPER = "paper-literal"
MODE_FDA = "standard-fda"
MODES = (MODE_PAPER, MODE_FDA)

# Non-symmetric spectra are a caller bug, not roundoff: fail well above the
# float64 noise floor.
RESIDUE_LIMIT = 1e-3


@dataclass(frozen=True)
class SpectrumPair:
    """Amplitude and phase of a 2D spectrum, DC bin at (H//2, W//2)."""

    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self) -> None:
        amp = np.asarray(self.amplitude, dtype=np.float64)
        ph = np.asarray(self.phase, dtype=np.float64)
        if amp.ndim != 2 or amp.shape != ph.shape:
            raise DataError(
                f"amplitude/phase must be matching 2D arrays, got "
                f"{amp.shape} and {ph.shape}"
            )
        if bool((amp < 0).any()):
            raise DataError("amplitude spectrum must be non-negative")
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "phase", ph)


@dataclass(frozen=True)
class FtaConfig:
    """Mixing policy: fixed lambda or a seeded uniform draw in [0, lambda_max]."""

    lambda_value: float | None = None
    lambda_max: float = 1.0
    mask_fraction: float = 0.25
    mode: str = MODE_PAPER
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("lambda_value", "lambda_max", "mask_fraction"):
            val = getattr(self, name)
            if val is None:
                continue
            if not 0.0 <= val <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {val}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def draw_lambda(self, rng: np.random.Generator | None = None) -> float:
        if self.lambda_value is not None:
            return float(self.lambda_value)
        if rng is None:
            rng = np.random.default_rng(self.seed)
        return float(rng.uniform(0.0, self.lambda_max))


@dataclass(frozen=True)
class AugmentedPair:
    z_w: Slice2D
    z_u: Slice2D
    lambda_used: float
    mask_fraction_used: float
    imag_residue: float


def dft2_forward(s: Slice2D) -> SpectrumPair:
    """Unnormalized forward 2D DFT as (modulus, argument), center-shifted."""
    spec = np.fft.fftshift(np.fft.fft2(s.data.astype(np.float64)))
    return SpectrumPair(np.abs(spec), np.angle(spec))


def _reconstruct(amplitude: np.ndarray, phase: np.ndarray) -> tuple[np.ndarray, float]:
    spec = amplitude * np.exp(1j * phase)
    z = np.fft.ifft2(np.fft.ifftshift(spec))
    return z.real, float(np.abs(z.imag).max())


def dft2_inverse(sp: SpectrumPair, like: Slice2D | None = None) -> Slice2D:
    """Inverse transform of amplitude * exp(i*phase), real part.

    Raises NumericError when the imaginary residue reaches 1e-3 in max-abs,
    which signals a spectrum without conjugate symmetry.
    """
    real, residue = _reconstruct(sp.amplitude, sp.phase)
    if residue >= RESIDUE_LIMIT:
        raise NumericError(
            f"imaginary residue {residue:.3e} from a non-symmetric spectrum"
        )
    if like is None:
        return Slice2D(real.astype(np.float32), "z", 0, "ifft")
    return Slice2D(real.astype(np.float32), like.axis_tag, like.index, like.source_id)


def make_center_mask(h: int, w: int, mask_fraction: float) -> np.ndarray:
    """Centered rectangle of ones, side round(fraction * dim) per axis."""
    if not 0.0 <= mask_fraction <= 1.0:
        raise ConfigError(f"mask_fraction must be in [0, 1], got {mask_fraction}")
    mask = np.zeros((h, w), dtype=np.float64)
    sh = int(np.floor(mask_fraction * h + 0.5))  # round half up
    sw = int(np.floor(mask_fraction * w + 0.5))
    if sh > 0 and sw > 0:
        r0 = h // 2 - sh // 2
        c0 = w // 2 - sw // 2
        mask[r0:r0 + sh, c0:c0 + sw] = 1.0
    return mask


def _conjugate_mirror_index(n: int) -> np.ndarray:
    # Position of the -f bin for each +f bin in the shifted layout.
    return (2 * (n // 2) - np.arange(n)) % n


def symmetrize_mask(mask: np.ndarray) -> np.ndarray:
    """Union of a mask with its conjugate mirror about the DC bin.

    Amplitude blending under a mask only keeps the spectrum Hermitian (and
    the reconstruction real) when the mask treats +-f bins alike; even-sided
    center rectangles are not symmetric on their own, so the augmentation
    path always blends under the symmetrized mask.
    """
    h, w = mask.shape
    mirrored = mask[np.ix_(_conjugate_mirror_index(h), _conjugate_mirror_index(w))]
    return np.maximum(mask, mirrored)


def fta_augment_pair(x_w: Slice2D, x_u: Slice2D, cfg: FtaConfig) -> AugmentedPair:
    """Blend low-frequency amplitudes of two slices, both directions at once.

    Inputs must share dims and hold normalized [0, 1] intensities. Outputs
    keep each input's phase and metadata; values may exit [0, 1] slightly
    since the amplitude blend does not preserve range.
    """
    if x_w.data.shape != x_u.data.shape:
        raise DataError(
            f"slice dims differ: {x_w.data.shape} vs {x_u.data.shape}"
        )
    for name, s in (("x_w", x_w), ("x_u", x_u)):
        if bool((s.data < 0.0).any()) or bool((s.data > 1.0).any()):
            raise DataError(f"{name} is not normalized to [0, 1]")
    sp_w = dft2_forward(x_w)
    sp_u = dft2_forward(x_u)
    lam = cfg.draw_lambda()
    h, w = x_w.data.shape
    mask = symmetrize_mask(make_center_mask(h, w, cfg.mask_fraction))
    inv = 1.0 - mask
    if cfg.mode == MODE_PAPER:
        a_w = (1.0 - lam) * sp_w.amplitude * inv + lam * sp_u.amplitude * mask
        a_u = (1.0 - lam) * sp_u.amplitude * inv + lam * sp_w.amplitude * mask
    else:
        a_w = sp_w.amplitude * inv + ((1.0 - lam) * sp_w.amplitude + lam * sp_u.amplitude) * mask
        a_u = sp_u.amplitude * inv + ((1.0 - lam) * sp_u.amplitude + lam * sp_w.amplitude) * mask
    z_w, res_w = _reconstruct(a_w, sp_w.phase)
    z_u, res_u = _reconstruct(a_u, sp_u.phase)
    return AugmentedPair(
        z_w=Slice2D(z_w.astype(np.float32), x_w.axis_tag, x_w.index, x_w.source_id),
        z_u=Slice2D(z_u.astype(np.float32), x_u.axis_tag, x_u.index, x_u.source_id),
        lambda_used=lam,
        mask_fraction_used=cfg.mask_fraction,
        imag_residue=max(res_w, res_u),
    )
