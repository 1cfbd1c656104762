"""Synthetic infrared/visible scene pairs, normalisation, augmentation and file formats.

Scenes are painted from a small table of materials. Each material fixes a
visible albedo, an emissivity and a temperature range. Every pixel's band
radiance is then built from the same decomposition the TeV model assumes:

    S = e * T + (1 - e) * (W @ S_grid)

where ``T`` is the normalised band exitance of the pixel's temperature,
``S_grid`` the m grid-cell means of ``S`` itself, and ``W`` smooth per-pixel
weights over the cells. Because ``S_grid`` depends on ``S``, the image is
found by solving a small m x m linear system. The weights ``W`` are then an
exact oracle for ``V``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .radiometry import LWIR_BAND, SpectralBand, band_exitance
from .tensor import FormatError, load_tensor, save_tensor
from .tev import DEFAULT_M, TeVComponents, grid_downsample, grid_layout, grid_matrix

T_MIN_K, T_MAX_K = 250.0, 400.0
E_MIN = 0.05


@dataclass(frozen=True)
class Material:
    name: str
    albedo: Tuple[float, float, float]
    emissivity: float
    t_range: Tuple[float, float]


# Albedo and temperature are deliberately decoupled for some entries
# (dark-but-hot engine, bright-but-cold metal) so the visible image is a
# useful but imperfect predictor of the infrared one.
MATERIALS: Tuple[Material, ...] = (
    Material("asphalt", (0.16, 0.16, 0.18), 0.93, (285.0, 335.0)),
    Material("concrete", (0.62, 0.60, 0.56), 0.90, (280.0, 315.0)),
    Material("bare_metal", (0.78, 0.78, 0.82), 0.12, (260.0, 330.0)),
    Material("vegetation", (0.22, 0.50, 0.16), 0.97, (280.0, 302.0)),
    Material("water", (0.10, 0.22, 0.45), 0.96, (276.0, 293.0)),
    Material("skin", (0.82, 0.62, 0.52), 0.98, (303.0, 310.0)),
    Material("engine", (0.22, 0.10, 0.08), 0.85, (340.0, 400.0)),
    Material("painted_car", (0.72, 0.12, 0.12), 0.60, (280.0, 330.0)),
)
BACKGROUND_MATERIALS = ("asphalt", "concrete", "vegetation", "water")


@dataclass(frozen=True)
class Primitive:
    kind: str                     # "rect" (x0, y0, x1, y1) or "disk" (cx, cy, r); pixel units
    geometry: Tuple[float, ...]
    temperature: float            # K
    emissivity: float
    albedo: Tuple[float, float, float]

    def mask(self, h: int, w: int) -> np.ndarray:
        yy, xx = np.mgrid[0:h, 0:w]
        if self.kind == "rect":
            x0, y0, x1, y1 = self.geometry
            return (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
        cx, cy, r = self.geometry
        return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int
    width: int
    primitives: Tuple[Primitive, ...]
    background_temperature: float
    background_emissivity: float
    background_albedo: Tuple[float, float, float] = (0.4, 0.4, 0.4)
    seed: int = 0
    m: int = DEFAULT_M
    band: SpectralBand = LWIR_BAND
    t_range: Tuple[float, float] = (T_MIN_K, T_MAX_K)
    tau_atm: float = 1.0
    atm_temperature: float = 270.0

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError("canvas must be at least 1x1")
        grid_layout(self.m)
        lo, hi = self.t_range
        if not 0 < lo < hi:
            raise ValueError(f"invalid temperature range {self.t_range}")
        if not 0.0 < self.tau_atm <= 1.0:
            raise ValueError(f"tau_atm must lie in (0, 1], got {self.tau_atm}")
        if self.tau_atm < 1.0 and not lo <= self.atm_temperature <= hi:
            raise ValueError("atmosphere temperature must lie inside the temperature range")
        items = [("background", self.background_temperature, self.background_emissivity, self.background_albedo)]
        items += [(f"primitive {i}", p.temperature, p.emissivity, p.albedo) for i, p in enumerate(self.primitives)]
        for name, t, e, a in items:
            if not lo <= t <= hi:
                raise ValueError(f"{name}: temperature {t} K outside [{lo}, {hi}]")
            if not E_MIN <= e <= 1.0:
                raise ValueError(f"{name}: emissivity {e} outside [{E_MIN}, 1]")
            if len(a) != 3 or min(a) < 0.0 or max(a) > 1.0:
                raise ValueError(f"{name}: albedo {a} must be three values in [0, 1]")
        for i, p in enumerate(self.primitives):
            if p.kind == "rect":
                x0, y0, x1, y1 = p.geometry
                ok = 0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height
            elif p.kind == "disk":
                cx, cy, r = p.geometry
                ok = r > 0 and r <= cx <= self.width - r and r <= cy <= self.height - r
            else:
                raise ValueError(f"primitive {i}: unknown kind {p.kind!r}")
            if not ok:
                raise ValueError(f"primitive {i}: {p.kind} {p.geometry} not inside {self.width}x{self.height} canvas")


@dataclass
class ScenePair:
    infrared: np.ndarray                 # H x W in [-1, 1]
    visible: np.ndarray                  # H x W x 3 in [-1, 1]
    norm_meta: Tuple[float, float]       # radiance (W m^-2) mapped to -1 and +1
    oracle: Optional[TeVComponents] = None
    seed: int = 0

    @property
    def synthetic(self) -> bool:
        return self.oracle is not None

    @property
    def infrared01(self) -> np.ndarray:
        return (self.infrared + 1.0) / 2.0


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def normalize(raw: np.ndarray, lo: Optional[float] = None, hi: Optional[float] = None):
    """Affine map of radiance to [-1, 1]; defaults to the image's own min and max."""
    raw = np.asarray(raw, dtype=np.float64)
    lo = float(raw.min()) if lo is None else float(lo)
    hi = float(raw.max()) if hi is None else float(hi)
    if not hi > lo:
        raise ValueError(f"degenerate normalisation range [{lo}, {hi}]")
    return 2.0 * (raw - lo) / (hi - lo) - 1.0, (lo, hi)


def denormalize(img: np.ndarray, meta: Tuple[float, float]) -> np.ndarray:
    lo, hi = meta
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0 * (hi - lo) + lo


def radiance_range(band: SpectralBand = LWIR_BAND, t_range=(T_MIN_K, T_MAX_K)) -> Tuple[float, float]:
    lo, hi = band_exitance(band, np.asarray(t_range, dtype=np.float64))
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def environment_weights(h: int, w: int, m: int) -> np.ndarray:
    """Per-pixel mixing weights (H, W, m) over grid cells; rows sum to one.

    Gaussian in the distance to each cell centre, so a pixel mostly reflects
    its own neighbourhood but sees a little of the rest of the scene.
    """
    rows, cols = grid_layout(m)
    cy = (np.arange(rows) + 0.5) * h / rows
    cx = (np.arange(cols) + 0.5) * w / cols
    centers = np.array([(y, x) for y in cy for x in cx])
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    d2 = (yy[..., None] - centers[:, 0]) ** 2 + (xx[..., None] - centers[:, 1]) ** 2
    scale = 0.5 * max(h / rows, w / cols)
    wts = np.exp(-d2 / (2.0 * scale ** 2))
    return wts / wts.sum(axis=-1, keepdims=True)


def _paint(spec: SyntheticSceneSpec):
    h, w = spec.height, spec.width
    temp = np.full((h, w), float(spec.background_temperature))
    emis = np.full((h, w), float(spec.background_emissivity))
    albedo = np.broadcast_to(np.asarray(spec.background_albedo, dtype=np.float64), (h, w, 3)).copy()
    for p in spec.primitives:
        mk = p.mask(h, w)
        temp[mk] = p.temperature
        emis[mk] = p.emissivity
        albedo[mk] = p.albedo
    return temp, emis, albedo


def _sobel_magnitude(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy)


def render_visible(albedo: np.ndarray, seed: int) -> np.ndarray:
    """Albedo with Sobel-edge darkening and a per-channel tint, mapped to [-1, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    lum = albedo @ np.array([0.299, 0.587, 0.114])
    edges = _sobel_magnitude(lum)
    peak = edges.max()
    if peak > 0:
        edges = edges / peak
    tint = rng.uniform(0.85, 1.15, size=3)
    vis = np.clip(albedo * (1.0 - 0.5 * edges)[..., None] * tint, 0.0, 1.0)
    return 2.0 * vis - 1.0


def generate_scene(spec: SyntheticSceneSpec) -> ScenePair:
    spec.validate()
    h, w, m = spec.height, spec.width, spec.m
    temp, emis, albedo = _paint(spec)
    lo, hi = radiance_range(spec.band, spec.t_range)

    uniq, inverse = np.unique(temp, return_inverse=True)
    radiance = band_exitance(spec.band, uniq)[inverse].reshape(h, w)
    self_em = (radiance - lo) / (hi - lo)
    if spec.tau_atm < 1.0:
        atm = (band_exitance(spec.band, spec.atm_temperature) - lo) / (hi - lo)
        self_em = spec.tau_atm * self_em + (1.0 - spec.tau_atm) * atm

    # S = e*T + (1-e) * Wts @ s with s = A @ S  =>  (I - A diag(1-e) Wts) s = A (e*T)
    A = grid_matrix(h, w, m)
    wts = environment_weights(h, w, m)
    wflat = wts.reshape(h * w, m)
    refl = (1.0 - emis).reshape(-1)
    emitted = (emis * self_em).reshape(-1)
    system = np.eye(m) - A @ (refl[:, None] * wflat)
    s_grid = np.linalg.solve(system, A @ emitted)
    S = (emitted + refl * (wflat @ s_grid)).reshape(h, w)

    infrared = 2.0 * S - 1.0
    oracle = TeVComponents(e=emis.copy(), T=self_em, V=wts)
    return ScenePair(infrared, render_visible(albedo, spec.seed), (lo, hi), oracle, spec.seed)


def random_scene_spec(rng: np.random.Generator, height: int = 64, width: int = 64, m: int = DEFAULT_M,
                      n_primitives: Tuple[int, int] = (3, 7), seed: int = 0) -> SyntheticSceneSpec:
    by_name = {mat.name: mat for mat in MATERIALS}
    bg = by_name[BACKGROUND_MATERIALS[rng.integers(len(BACKGROUND_MATERIALS))]]

    def draw(mat: Material):
        t = float(rng.uniform(*mat.t_range))
        e = float(np.clip(mat.emissivity + rng.uniform(-0.03, 0.03), E_MIN, 1.0))
        a = tuple(float(v) for v in np.clip(np.asarray(mat.albedo) + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0))
        return t, e, a

    bg_t, bg_e, bg_a = draw(bg)
    prims = []
    size = min(height, width)
    for _ in range(int(rng.integers(n_primitives[0], n_primitives[1] + 1))):
        mat = MATERIALS[rng.integers(len(MATERIALS))]
        t, e, a = draw(mat)
        if rng.random() < 0.5:
            pw = int(rng.integers(max(2, size // 8), max(3, size // 2)))
            ph = int(rng.integers(max(2, size // 8), max(3, size // 2)))
            x0 = int(rng.integers(0, width - pw + 1))
            y0 = int(rng.integers(0, height - ph + 1))
            prims.append(Primitive("rect", (x0, y0, x0 + pw, y0 + ph), t, e, a))
        else:
            r = float(rng.uniform(max(1.5, size / 16), max(2.0, size / 5)))
            cx = float(rng.uniform(r, width - r))
            cy = float(rng.uniform(r, height - r))
            prims.append(Primitive("disk", (cx, cy, r), t, e, a))
    return SyntheticSceneSpec(height, width, tuple(prims), bg_t, bg_e, bg_a, seed=seed, m=m)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(n: int, height: int = 64, width: int = 64, seed: int = 0, m: int = DEFAULT_M) -> List[ScenePair]:
    pairs = []
    for i in range(n):
        s = scene_seed(seed, i)
        spec = random_scene_spec(np.random.default_rng(s), height, width, m, seed=s)
        pairs.append(generate_scene(spec))
    return pairs


def stack_pairs(pairs: Sequence[ScenePair]) -> Tuple[np.ndarray, np.ndarray]:
    """(N, H, W) infrared and (N, H, W, 3) visible arrays."""
    return np.stack([p.infrared for p in pairs]), np.stack([p.visible for p in pairs])


def visible_luminance01(visible: np.ndarray) -> np.ndarray:
    """Grey-level version of a [-1, 1] visible image, rescaled to [0, 1]."""
    return ((np.asarray(visible) + 1.0) / 2.0) @ np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _flip_permutation(m: int) -> np.ndarray:
    rows, cols = grid_layout(m)
    return np.array([r * cols + (cols - 1 - c) for r in range(rows) for c in range(cols)])


def _refit_V(V: np.ndarray, env: np.ndarray, s_grid: np.ndarray) -> np.ndarray:
    # smallest change to each pixel's V that reproduces its environment term
    denom = float(s_grid @ s_grid)
    if denom == 0.0:
        return V
    resid = env - V @ s_grid
    return V + resid[..., None] * s_grid / denom


def flip_pair(pair: ScenePair) -> ScenePair:
    """Horizontal mirror of every map in the pair."""
    tf = lambda a: np.ascontiguousarray(a[:, ::-1])
    ir = tf(pair.infrared)
    oracle = None
    if pair.oracle is not None:
        o = pair.oracle
        V = tf(o.V)[..., _flip_permutation(o.m)]
        # the permutation alone is exact when the grid splits the width evenly
        env = tf(o.env_field(pair.infrared01))
        V = _refit_V(V, env, grid_downsample((ir + 1.0) / 2.0, o.m))
        oracle = TeVComponents(tf(o.e), tf(o.T), V)
    return replace(pair, infrared=ir, visible=tf(pair.visible), oracle=oracle)


def crop_pair(pair: ScenePair, top: int, left: int, height: int, width: int) -> ScenePair:
    H, W = pair.infrared.shape
    if height > H or width > W:
        raise ValueError(f"crop {height}x{width} larger than image {H}x{W}")
    if not (0 <= top <= H - height and 0 <= left <= W - width):
        raise ValueError(f"crop window ({top}, {left}, {height}, {width}) outside {H}x{W} image")
    tf = lambda a: np.ascontiguousarray(a[top:top + height, left:left + width])
    ir = tf(pair.infrared)
    oracle = None
    if pair.oracle is not None:
        o = pair.oracle
        env = tf(o.env_field(pair.infrared01))
        V = _refit_V(tf(o.V), env, grid_downsample((ir + 1.0) / 2.0, o.m))
        oracle = TeVComponents(tf(o.e), tf(o.T), V)
    return replace(pair, infrared=ir, visible=tf(pair.visible), oracle=oracle)


def augment(pair: ScenePair, rng: np.random.Generator, crop: Optional[Tuple[int, int]] = None,
            flip_prob: float = 0.5) -> ScenePair:
    """Random crop (when ``crop`` is given) followed by a random horizontal flip."""
    H, W = pair.infrared.shape
    if crop is not None:
        ch, cw = crop
        if ch > H or cw > W:
            raise ValueError(f"crop {ch}x{cw} larger than image {H}x{W}")
        top = int(rng.integers(0, H - ch + 1))
        left = int(rng.integers(0, W - cw + 1))
        pair = crop_pair(pair, top, left, ch, cw)
    if rng.random() < flip_prob:
        pair = flip_pair(pair)
    return pair


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

MANIFEST = "manifest.tsv"
_CHANNELS = ("infrared", "visible", "e", "T", "V")


def save_dataset(pairs: Sequence[ScenePair], directory) -> Path:
    """One TSR1 blob per channel plus a manifest line per blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, pair in enumerate(pairs):
        blobs = {"infrared": pair.infrared, "visible": pair.visible}
        if pair.oracle is not None:
            blobs.update(e=pair.oracle.e, T=pair.oracle.T, V=pair.oracle.V)
        lo, hi = pair.norm_meta
        for ch, arr in blobs.items():
            name = f"{i:05d}_{ch}.tsr"
            save_tensor(directory / name, np.asarray(arr, dtype=np.float64))
            lines.append(f"{i}\t{name}\t{lo!r}\t{hi!r}\t{pair.seed}\n")
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    os.replace(tmp, directory / MANIFEST)
    return directory


def read_manifest(directory) -> List[Tuple[int, str, float, float, int]]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        try:
            rows.append((int(parts[0]), parts[1], float(parts[2]), float(parts[3]), int(parts[4])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return rows


def load_dataset(directory) -> List[ScenePair]:
    directory = Path(directory)
    groups: Dict[int, Dict[str, object]] = {}
    for index, name, lo, hi, seed in read_manifest(directory):
        channel = name.split("_", 1)[1].rsplit(".", 1)[0]
        if channel not in _CHANNELS:
            raise FormatError(f"manifest entry {name!r} has unknown channel {channel!r}")
        try:
            arr = load_tensor(directory / name)
        except FormatError as exc:
            raise FormatError(f"{directory / name}: {exc}") from None
        g = groups.setdefault(index, {"meta": (lo, hi), "seed": seed})
        g[channel] = arr
    pairs = []
    for index in sorted(groups):
        g = groups[index]
        if "infrared" not in g or "visible" not in g:
            raise FormatError(f"pair {index} is missing its infrared or visible blob")
        oracle = None
        if all(k in g for k in ("e", "T", "V")):
            oracle = TeVComponents(g["e"], g["T"], g["V"])
        pairs.append(ScenePair(g["infrared"], g["visible"], g["meta"], oracle, g["seed"]))
    return pairs


def write_pgm16(path, img: np.ndarray, sidecar: bool = True) -> Tuple[float, float]:
    """16-bit binary PGM with linear min-max scaling; returns (min, max).

    With ``sidecar`` the range is also written to ``<path>.range`` so the
    export can be mapped back to physical units.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D map, got {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    q = np.zeros(img.shape) if span == 0 else (img - lo) / span
    data = np.round(q * 65535.0).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
    if sidecar:
        Path(f"{path}.range").write_text(f"min\t{lo!r}\nmax\t{hi!r}\n", encoding="utf-8")
    return lo, hi


def read_pgm16(path) -> np.ndarray:
    """Raw 16-bit values of a P5 file written by :func:`write_pgm16`."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM at offset 0")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 65535:
        raise FormatError(f"{path}: expected maxval 65535")
    payload = parts[3]
    if len(payload) != 2 * w * h:
        offset = len(raw) - len(payload)
        raise FormatError(f"{path}: truncated PGM payload at offset {offset}")
    return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.uint16)
