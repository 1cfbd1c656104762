"""TeV / TeS decomposition of infrared images.

An infrared image ``S`` (radiance scaled to [0, 1]) is explained per pixel as

    S ~= e * T + (1 - e) * env

where ``e`` is emissivity, ``T`` self-emission, and ``env`` the reflected
environment radiation. The TeV head models ``env`` as ``<V[pixel], S_grid>``, a
per-pixel mix of the ``m`` grid-cell means of the image itself. The TeS head
predicts ``env`` directly as a non-negative map.

Array conventions: the component dataclasses hold numpy maps laid out H x W
(and H x W x m for ``V``); the network works on NCHW tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    AdamW,
    Conv2d,
    Module,
    Tensor,
    avg_pool2d,
    concat,
    load_checkpoint,
    mul_channel,
    no_grad,
    ops,
    save_checkpoint,
    upsample_nearest2x,
)

GRID_LAYOUTS: Dict[int, Tuple[int, int]] = {2: (1, 2), 4: (2, 2), 8: (2, 4)}
DEFAULT_M = 4


def grid_layout(m: int) -> Tuple[int, int]:
    try:
        return GRID_LAYOUTS[m]
    except KeyError:
        raise ValueError(f"unsupported grid count m={m}; expected one of {sorted(GRID_LAYOUTS)}") from None


@lru_cache(maxsize=32)
def _grid_matrix_cached(h: int, w: int, m: int) -> np.ndarray:
    rows, cols = grid_layout(m)
    ph, pw = -h % rows, -w % cols
    # reflect-pad the pixel index map, then average the padded cells
    idx = np.arange(h * w).reshape(h, w)
    if ph or pw:
        idx = np.pad(idx, ((0, ph), (0, pw)), mode="reflect")
    H, W = idx.shape
    ch, cw = H // rows, W // cols
    A = np.zeros((m, h * w))
    for r in range(rows):
        for c in range(cols):
            cell = idx[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw].reshape(-1)
            np.add.at(A[r * cols + c], cell, 1.0 / cell.size)
    A.setflags(write=False)
    return A


def grid_matrix(h: int, w: int, m: int) -> np.ndarray:
    """Linear map (m, h*w) taking a flattened image to its grid-cell means."""
    return _grid_matrix_cached(int(h), int(w), int(m))


def grid_downsample(S: np.ndarray, m: int) -> np.ndarray:
    """Cell means of an H x W image (cells in row-major order)."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError(f"grid_downsample expects an H x W image, got {S.shape}")
    return grid_matrix(*S.shape, m) @ S.reshape(-1)


def grid_downsample_tensor(S: Tensor, m: int) -> Tensor:
    """Batched version on a (B, 1, H, W) tensor; returns (B, m)."""
    B, C, H, W = S.shape
    if C != 1:
        raise ValueError(f"expected single-channel images, got {C} channels")
    A = Tensor(grid_matrix(H, W, m).T, dtype=S.dtype)
    return ops.matmul(ops.reshape(S, (B, H * W)), A)


# ---------------------------------------------------------------------------
# components and reconstruction
# ---------------------------------------------------------------------------

@dataclass
class TeVComponents:
    e: np.ndarray   # H x W, in [0, 1]
    T: np.ndarray   # H x W, >= 0
    V: np.ndarray   # H x W x m

    @property
    def m(self) -> int:
        return self.V.shape[-1]

    def env_field(self, S: np.ndarray) -> np.ndarray:
        return self.V @ grid_downsample(S, self.m)


@dataclass
class TeSComponents:
    e: np.ndarray
    T: np.ndarray
    phi_env: np.ndarray


def tev_reconstruct(comps: TeVComponents, S: np.ndarray, m: Optional[int] = None) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if m is not None and m != comps.m:
        raise ValueError(f"components carry m={comps.m} but m={m} was requested")
    if comps.e.shape != S.shape or comps.T.shape != S.shape or comps.V.shape[:2] != S.shape:
        raise ValueError("component maps must share the source image's H x W")
    e = comps.e
    return e * comps.T + (1.0 - e) * comps.env_field(S)


def tes_reconstruct(comps: TeSComponents) -> np.ndarray:
    if not (comps.e.shape == comps.T.shape == comps.phi_env.shape):
        raise ValueError("TeS component maps must share one shape")
    return comps.e * comps.T + (1.0 - comps.e) * comps.phi_env


def reconstruct_tensor(out: Tensor, S: Tensor, head: str, m: int) -> Tensor:
    """Differentiable reconstruction from a raw head output of shape (B, K, H, W)."""
    e = out[:, 0:1]
    T = out[:, 1:2]
    if head == "tev":
        V = out[:, 2:2 + m]
        s_hat = grid_downsample_tensor(S, m)
        env = ops.sum_(mul_channel(V, s_hat), axis=1, keepdims=True)
    else:
        env = out[:, 2:3]
    return e * T + (1.0 - e) * env


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class _Block(Module):
    """Two 3x3 convolutions with SiLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.silu(self.conv2(ops.silu(self.conv1(x))))


class TeVNet(Module):
    """Three-level conv encoder-decoder with skip connections and a TeV or TeS head.

    The head is a 1x1 convolution producing ``2 + m`` (TeV) or 3 (TeS)
    channels; channel 0 goes through a sigmoid (emissivity), channel 1 through
    a ReLU (self-emission), the rest are linear (V) or ReLU (environment map).
    """

    def __init__(self, m: int = DEFAULT_M, head: str = "tev", widths: Sequence[int] = (16, 32, 64), seed: int = 0):
        if head not in ("tev", "tes"):
            raise ValueError(f"head must be 'tev' or 'tes', got {head!r}")
        grid_layout(m)
        if len(widths) != 3:
            raise ValueError("TeVNet needs three channel widths")
        rng = np.random.default_rng(seed)
        c1, c2, c3 = widths
        self.m, self.head, self.widths = m, head, tuple(int(c) for c in widths)
        self.enc1 = _Block(1, c1, rng)
        self.enc2 = _Block(c1, c2, rng)
        self.mid = _Block(c2, c3, rng)
        self.dec2 = _Block(c3 + c2, c2, rng)
        self.dec1 = _Block(c2 + c1, c1, rng)
        self.out = Conv2d(c1, self.out_channels, 1, rng)
        # small positive bias keeps the ReLU heads alive at initialisation
        b = self.out.bias.data
        b[1] = 0.5
        if head == "tes":
            b[2] = 0.5

    @property
    def out_channels(self) -> int:
        return 2 + self.m if self.head == "tev" else 3

    @property
    def downsample_factor(self) -> int:
        return 4

    def raw(self, x: Tensor) -> Tensor:
        """Head output (B, K, H, W) with activations applied."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"TeVNet expects (B, 1, H, W) input, got {x.shape}")
        H, W = x.shape[2:]
        if H % 4 or W % 4:
            raise ValueError(f"TeVNet input {H}x{W} must be a multiple of 4")
        h1 = self.enc1(x)
        h2 = self.enc2(avg_pool2d(h1, 2))
        h3 = self.mid(avg_pool2d(h2, 2))
        d2 = self.dec2(concat([upsample_nearest2x(h3), h2], axis=1))
        d1 = self.dec1(concat([upsample_nearest2x(d2), h1], axis=1))
        y = self.out(d1)
        parts = [ops.sigmoid(y[:, 0:1]), ops.relu(y[:, 1:2])]
        if self.head == "tev":
            parts.append(y[:, 2:])
        else:
            parts.append(ops.relu(y[:, 2:3]))
        return concat(parts, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.raw(x)

    def reconstruct(self, x: Tensor) -> Tensor:
        return reconstruct_tensor(self.raw(x), x, self.head, self.m)

    def decompose(self, S: np.ndarray):
        """Components of a single H x W image in [0, 1] as numpy maps."""
        S = np.asarray(S)
        with no_grad():
            y = self.raw(Tensor(S[None, None], dtype=self.dtype)).data[0].astype(np.float64)
        if self.head == "tev":
            return TeVComponents(y[0], y[1], np.moveaxis(y[2:], 0, -1))
        return TeSComponents(y[0], y[1], y[2])

    @property
    def dtype(self):
        return self.out.weight.dtype


def as_image_batch(images, dtype=None) -> Tensor:
    """(N, H, W) numpy images -> (N, 1, H, W) tensor."""
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (N, H, W) images, got {arr.shape}")
    return Tensor(arr[:, None], dtype=dtype)


def tev_selfsup_loss(model: TeVNet, S) -> Tensor:
    """Mean squared self-reconstruction error on a batch of [0, 1] images."""
    x = S if isinstance(S, Tensor) else as_image_batch(S, dtype=model.dtype)
    return ops.mse(model.reconstruct(x), x)


def reconstruction_errors(model: TeVNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Per-image self-reconstruction MSE, no graph recorded."""
    images = np.asarray(images)
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = as_image_batch(images[i:i + batch_size], dtype=model.dtype)
            r = model.reconstruct(x).data
            out.append(((r - x.data) ** 2).reshape(len(r), -1).mean(axis=1))
    return np.concatenate(out).astype(np.float64)


@dataclass
class TeVTrainResult:
    model: TeVNet
    history: List[float]


def train_tevnet(model: TeVNet, dataset: np.ndarray, epochs: int, lr: float = 1e-3, seed: int = 0,
                 batch_size: int = 16) -> TeVTrainResult:
    """Self-supervised training with Adam; ``history`` holds the mean loss per epoch.

    Shuffling uses ``seed`` only, so a given (model init, data, seed) always
    produces bit-identical weights.
    """
    dataset = np.asarray(dataset)
    if dataset.ndim != 3 or len(dataset) == 0:
        raise ValueError("train_tevnet needs a non-empty (N, H, W) dataset")
    history: List[float] = []
    if epochs <= 0:
        return TeVTrainResult(model, history)
    opt = AdamW(model.trainable_parameters(), lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            opt.zero_grad()
            loss = tev_selfsup_loss(model, dataset[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
    return TeVTrainResult(model, history)


def save_tevnet(model: TeVNet, path) -> None:
    state = {f"tevnet.{k}": v for k, v in model.state_dict().items()}
    state["meta.tevnet"] = np.array([model.m, 0 if model.head == "tev" else 1, *model.widths], dtype=np.float64)
    save_checkpoint(path, state)


def load_tevnet(path, frozen: bool = True) -> TeVNet:
    state = load_checkpoint(path)
    return tevnet_from_state(state, frozen=frozen)


def tevnet_from_state(state: Dict[str, np.ndarray], frozen: bool = True) -> TeVNet:
    if "meta.tevnet" not in state:
        raise KeyError("checkpoint has no TeVNet metadata")
    meta = state["meta.tevnet"].astype(int)
    model = TeVNet(m=int(meta[0]), head="tev" if meta[1] == 0 else "tes", widths=tuple(meta[2:5]))
    prefix = "tevnet."
    weights = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    dtype = next(iter(weights.values())).dtype
    model.astype(dtype)
    model.load_state_dict(weights)
    if frozen:
        model.freeze()
    return model
