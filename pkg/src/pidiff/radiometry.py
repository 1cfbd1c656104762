"""Blackbody radiometry: Planck spectral exitance, band integrals and closed-form checks.

Everything here works in SI units except :func:`wien_peak`, which returns
micrometres. The Planck expression carries the hemispherical ``2*pi`` factor,
so integrating it over all wavelengths gives ``sigma * T**4``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PhysicalConstants:
    h: float = 6.62607015e-34        # J s
    c: float = 2.99792458e8          # m / s
    k_B: float = 1.380649e-23        # J / K
    b: float = 2898.0                # um K (Wien displacement)
    sigma_SB: float = 5.670374e-8    # W m^-2 K^-4
    tau_atm: float = 1.0

    def __post_init__(self):
        for name in ("h", "c", "k_B", "b", "sigma_SB"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0.0 < self.tau_atm <= 1.0:
            raise ValueError(f"tau_atm must lie in (0, 1], got {self.tau_atm}")


CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class SpectralBand:
    lambda_min: float  # m
    lambda_max: float  # m

    def __post_init__(self):
        if not (0.0 < self.lambda_min < self.lambda_max):
            raise ValueError(f"invalid band [{self.lambda_min}, {self.lambda_max}] m")


# long-wave infrared camera band
LWIR_BAND = SpectralBand(7.5e-6, 13.5e-6)
# wide enough that the band integral is within a fraction of a percent of sigma*T^4
NEAR_TOTAL_BAND = SpectralBand(1e-7, 1e-3)

QUADRATURE_NODES = 1024


def _check_positive(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"{name} must be finite and strictly positive")
    return arr


def planck_spectral_exitance(lam, T, const: PhysicalConstants = CONSTANTS):
    """Spectral exitance in W m^-3 at wavelength ``lam`` (m) and temperature ``T`` (K).

    Broadcasts over array inputs. ``expm1`` keeps the long-wavelength tail
    accurate, and the exponent is clipped so very short wavelengths underflow
    to zero instead of overflowing.
    """
    lam = _check_positive("wavelength", lam)
    T = _check_positive("temperature", T)
    x = np.minimum(const.h * const.c / (lam * const.k_B * T), 700.0)
    prefactor = 2.0 * np.pi * const.h * const.c ** 2 / lam ** 5
    out = prefactor / np.expm1(x)
    return float(out) if out.ndim == 0 else out


def _simpson_weights(n: int) -> np.ndarray:
    if n < 3 or n % 2 == 0:
        raise ValueError("composite Simpson needs an odd node count >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def band_exitance(band: SpectralBand, T, const: PhysicalConstants = CONSTANTS, nodes: int = QUADRATURE_NODES):
    """Integral of the spectral exitance over ``band`` (W m^-2), vectorised over ``T``.

    The integral is taken in ``u = ln(lambda)`` (``d lambda = lambda du``) with
    composite Simpson on ``nodes`` equally spaced points in ``u``. An even node
    count is bumped to the next odd one, so 1024 requested nodes become 1025.
    """
    if not isinstance(band, SpectralBand):
        raise TypeError("band must be a SpectralBand")
    T = _check_positive("temperature", T)
    n = nodes + 1 if nodes % 2 == 0 else nodes
    u = np.linspace(np.log(band.lambda_min), np.log(band.lambda_max), n)
    lam = np.exp(u)
    du = u[1] - u[0]
    integrand = planck_spectral_exitance(lam[None, :], T.reshape(-1, 1), const) * lam[None, :]
    out = (integrand * _simpson_weights(n)).sum(axis=1) * du
    return float(out[0]) if T.ndim == 0 else out.reshape(T.shape)


def wien_peak(T, const: PhysicalConstants = CONSTANTS):
    """Wavelength of maximum spectral exitance in micrometres."""
    T = _check_positive("temperature", T)
    out = const.b / T
    return float(out) if out.ndim == 0 else out


def stefan_boltzmann_exitance(T, const: PhysicalConstants = CONSTANTS):
    T = _check_positive("temperature", T)
    out = const.sigma_SB * T ** 4
    return float(out) if out.ndim == 0 else out
