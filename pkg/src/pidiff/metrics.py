"""Image-quality metrics, 1-D earth mover's distance and the sampling cost model."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Activation, AvgPool, Conv2d, Linear, Module, Sequential, Upsample, no_grad, ops

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr_flagged(a, b, data_range: float = 2.0) -> Tuple[float, bool]:
    """PSNR in dB and whether it hit the cap (identical images)."""
    a, b = _pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP, True
    return min(10.0 * np.log10(data_range ** 2 / err), PSNR_CAP), False


def psnr(a, b, data_range: float = 2.0) -> float:
    """``10 log10(range^2 / MSE)``; identical images give the 99 dB cap.

    The default range of 2 matches images stored in [-1, 1].
    """
    return psnr_flagged(a, b, data_range)[0]


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b, data_range: float = 2.0) -> float:
    """Mean structural similarity over all fully-covered 11x11 Gaussian windows."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim expects 2-D images, got {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def emd_1d(p, q) -> float:
    """Earth mover's distance between two empirical 1-D distributions.

    Integrates |F_p - F_q| over the merged support; for equal sample counts
    this equals the mean absolute difference of the sorted samples.
    """
    p = np.sort(np.asarray(p, dtype=np.float64).ravel())
    q = np.sort(np.asarray(q, dtype=np.float64).ravel())
    if p.size == 0 or q.size == 0:
        raise ValueError("emd_1d needs two non-empty samples")
    grid = np.sort(np.concatenate([p, q]))
    widths = np.diff(grid)
    cdf_p = np.searchsorted(p, grid[:-1], side="right") / p.size
    cdf_q = np.searchsorted(q, grid[:-1], side="right") / q.size
    return float(np.sum(np.abs(cdf_p - cdf_q) * widths))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    capped: List[bool] = field(default_factory=list)
    names: List[str] = field(default_factory=list)

    def add(self, name: str, a, b, data_range: float = 2.0) -> None:
        value, flag = psnr_flagged(a, b, data_range)
        self.names.append(name)
        self.psnr.append(value)
        self.capped.append(flag)
        self.ssim.append(ssim(a, b, data_range))

    def aggregate(self) -> dict:
        p, s = np.asarray(self.psnr), np.asarray(self.ssim)
        return {"psnr_mean": float(p.mean()), "psnr_std": float(p.std()),
                "ssim_mean": float(s.mean()), "ssim_std": float(s.std()), "capped": int(sum(self.capped))}

    def to_table(self) -> str:
        lines = [f"{'image':<16}{'PSNR (dB)':>12}{'SSIM':>10}  flag"]
        for n, p, s, c in zip(self.names, self.psnr, self.ssim, self.capped):
            lines.append(f"{n:<16}{p:>12.4f}{s:>10.6f}  {'capped' if c else ''}".rstrip())
        agg = self.aggregate()
        lines.append(f"{'mean +- std':<16}{agg['psnr_mean']:>8.4f}+-{agg['psnr_std']:<6.3f}"
                     f"{agg['ssim_mean']:>8.6f}+-{agg['ssim_std']:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["image,psnr_db,ssim,capped"]
        lines += [f"{n},{p!r},{s!r},{int(c)}" for n, p, s, c in zip(self.names, self.psnr, self.ssim, self.capped)]
        agg = self.aggregate()
        lines.append(f"mean,{agg['psnr_mean']!r},{agg['ssim_mean']!r},{agg['capped']}")
        lines.append(f"std,{agg['psnr_std']!r},{agg['ssim_std']!r},")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def _exact(value) -> Fraction:
    return Fraction(str(value)) if isinstance(value, float) else Fraction(value)


@dataclass(frozen=True)
class CostModel:
    """Sampling cost: conditioner once, denoiser once per step, decoder once."""

    conditioner: float
    unet: float
    decoder: float

    def total(self, s: int) -> float:
        if s < 0:
            raise ValueError("step count must be non-negative")
        exact = _exact(self.conditioner) + _exact(self.unet) * s + _exact(self.decoder)
        return float(exact)

    def table(self, steps: Sequence[int], unit: str = "G") -> str:
        lines = [f"s\ttotal_{unit}MACs"]
        lines += [f"{s}\t{self.total(s):.2f}" for s in steps]
        return "\n".join(lines) + "\n"


def macs_total(model: CostModel, s: int) -> float:
    return model.total(s)


SUPPORTED_LEAVES = (Conv2d, Linear, Activation, AvgPool, Upsample, Sequential)


@contextlib.contextmanager
def counting_macs() -> Iterator[list]:
    prev = ops._mac_counter
    ops._mac_counter = [0]
    try:
        yield ops._mac_counter
    finally:
        ops._mac_counter = prev


def check_countable(network: Module) -> None:
    """Every leaf module must be a layer kind whose cost the counter understands."""
    for mod in network.modules():
        children = list(mod.named_children())
        if children:
            continue
        if not isinstance(mod, SUPPORTED_LEAVES) and mod.parameters():
            raise TypeError(f"cannot count MACs for layer kind {type(mod).__name__}")


def macs_count(fn, *inputs, network: Module = None) -> int:
    """Multiply-accumulates of conv and linear layers during one call of ``fn(*inputs)``.

    Conv layers count ``O * C * k^2 * H_out * W_out`` and linear layers
    ``in * out`` per sample; pass single-sample inputs for per-image counts.
    """
    target = network if network is not None else (fn if isinstance(fn, Module) else None)
    if target is not None:
        check_countable(target)
    with no_grad(), counting_macs() as counter:
        fn(*inputs)
    return int(counter[0])
