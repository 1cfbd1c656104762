"""Noise, reconstruction and TeV-space losses, the combined training step and the loop.

The reconstruction and TeV-space losses pass the predicted clean image through
a frozen decomposition network. Their gradients reach the denoiser (and a
trainable conditioner) only through the predicted image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffusion import (
    ConvCodec,
    Denoiser,
    EncoderConditioner,
    IdentityCodec,
    MLPConditioner,
    NoiseSchedule,
    build_linear_schedule,
    desk_schedule,
    forward_diffuse,
    predict_x0,
    rgb_to_tensor,
)
from .tensor import (
    AdamW,
    FrozenParameterError,
    Module,
    Tensor,
    load_checkpoint,
    no_grad,
    ops,
    save_checkpoint,
)
from .tev import TeVNet, reconstruct_tensor, reconstruction_errors


@dataclass(frozen=True)
class LossWeights:
    k1: float = 50.0   # reconstruction loss
    k2: float = 5.0    # TeV-space loss

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError(f"loss weights must be non-negative, got ({self.k1}, {self.k2})")

    @property
    def physics(self) -> bool:
        return self.k1 > 0 or self.k2 > 0


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 8
    accumulation: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    physics_max_t: Optional[int] = None   # apply physics losses only where t <= this
    log_every: int = 50
    checkpoint_every: int = 0              # 0 disables intermediate checkpoints
    log_physics: bool = True               # report physics losses even when their weight is 0
    flip: bool = True

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.accumulation < 1:
            raise ValueError("accumulation factor must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation


@dataclass
class PIDModel:
    denoiser: Denoiser
    conditioner: Module
    codec: Module
    sched: NoiseSchedule
    tevnet: Optional[TeVNet] = None

    def __post_init__(self):
        if self.tevnet is not None and not self.tevnet.frozen:
            raise FrozenParameterError("the decomposition network must be frozen before PID training")
        if not isinstance(self.codec, IdentityCodec) and not self.codec.frozen:
            raise FrozenParameterError("the codec must be frozen before PID training")

    def trainable_parameters(self):
        return self.denoiser.trainable_parameters() + self.conditioner.trainable_parameters()

    @property
    def dtype(self):
        return self.denoiser.out.weight.dtype

    def frozen_hash(self) -> str:
        parts = [self.codec.weight_hash()]
        if self.tevnet is not None:
            parts.append(self.tevnet.weight_hash())
        return ":".join(parts)


def build_pid_model(image_size: int, codec: Module, conditioner_kind: str = "mlp", tevnet: Optional[TeVNet] = None,
                    sched: Optional[NoiseSchedule] = None, widths=(32, 64), cond_c: int = 4, seed: int = 0,
                    temb_dim: int = 64, cond_hidden: int = 32) -> PIDModel:
    if conditioner_kind == "mlp":
        conditioner = MLPConditioner(codec.factor, cond_c, hidden=cond_hidden, seed=seed + 1)
    elif conditioner_kind == "encoder":
        if isinstance(codec, IdentityCodec) or codec.frozen:
            conditioner = EncoderConditioner(codec)
        else:
            raise ValueError("the encoder conditioner needs a trained, frozen codec")
    else:
        raise ValueError(f"unknown conditioner kind {conditioner_kind!r}")
    if image_size % (2 * codec.factor):
        raise ValueError(f"image size {image_size} incompatible with codec factor {codec.factor}")
    denoiser = Denoiser(codec.latent_c, conditioner.out_c, widths=widths, temb_dim=temb_dim, seed=seed)
    return PIDModel(denoiser, conditioner, codec, sched or desk_schedule(), tevnet)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_noise(eps, eps_hat: Tensor) -> Tensor:
    """Mean absolute error between true and predicted noise."""
    eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps), dtype=eps_hat.dtype)
    if eps_t.shape != eps_hat.shape:
        raise ValueError(f"noise shapes differ: {eps_t.shape} vs {eps_hat.shape}")
    return ops.l1(eps_hat, eps_t)


def _to01(x: Tensor) -> Tensor:
    return (x + 1.0) * 0.5


def _masked_mse(a: Tensor, b, weights: Optional[np.ndarray]) -> Tensor:
    """MSE averaged per sample, then combined with per-sample ``weights`` summing to one."""
    diff = ops.square(ops.sub(a, b))
    if weights is not None:
        diff = ops.scale_batch(diff, weights * a.shape[0])
    return ops.mean(diff)


def _require_frozen(tevnet: Optional[TeVNet]) -> TeVNet:
    if tevnet is None:
        raise ValueError("physics losses need a decomposition network")
    if not tevnet.frozen:
        raise FrozenParameterError("the decomposition network must be frozen for the physics losses")
    return tevnet


def loss_rec(x0_hat: Tensor, tevnet: TeVNet, weights: Optional[np.ndarray] = None) -> Tensor:
    """Self-reconstruction MSE of the predicted image (in [-1, 1]) through the frozen network."""
    tevnet = _require_frozen(tevnet)
    x01 = _to01(x0_hat)
    return _masked_mse(tevnet.reconstruct(x01), x01, weights)


def loss_tev(x0_hat: Tensor, x0, tevnet: TeVNet, weights: Optional[np.ndarray] = None,
             target: Optional[Tensor] = None) -> Tensor:
    """MSE between decompositions of the predicted and the reference image (both in [-1, 1])."""
    tevnet = _require_frozen(tevnet)
    if target is None:
        x0_t = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0), dtype=x0_hat.dtype)
        if x0_t.shape != x0_hat.shape:
            raise ValueError(f"image shapes differ: {x0_hat.shape} vs {x0_t.shape}")
        target = tevnet.raw(_to01(x0_t))
        if not x0_t.requires_grad:
            target = target.detach()
    return _masked_mse(tevnet.raw(_to01(x0_hat)), target, weights)


def physics_losses(x0_hat: Tensor, x0: Tensor, tevnet: TeVNet,
                   weights: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
    """Both physics losses from a single decomposition of the predicted image."""
    tevnet = _require_frozen(tevnet)
    x01 = _to01(x0_hat)
    comps = tevnet.raw(x01)
    rec = reconstruct_tensor(comps, x01, tevnet.head, tevnet.m)
    with no_grad():
        target = tevnet.raw(_to01(x0))
    return _masked_mse(rec, x01, weights), _masked_mse(comps, target, weights)


def per_image_loss_rec(images: np.ndarray, tevnet: TeVNet, batch_size: int = 64) -> np.ndarray:
    """Reconstruction loss of each (H, W) image in [-1, 1]; used for evaluation."""
    return reconstruction_errors(tevnet, (np.asarray(images) + 1.0) / 2.0, batch_size)


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    total: float
    l_noise: float
    l_rec: float
    l_tev: float

    def as_dict(self) -> Dict[str, float]:
        return {"total": self.total, "l_noise": self.l_noise, "l_rec": self.l_rec, "l_tev": self.l_tev}


def element_rng(seed: int, iteration: int, element: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, iteration, element])))


@dataclass
class Batch:
    infrared: np.ndarray   # (B, H, W) in [-1, 1]
    visible: np.ndarray    # (B, H, W, 3) in [-1, 1]
    t: np.ndarray          # (B,) timesteps
    eps: np.ndarray        # (B, c, h, w) latent noise
    index: np.ndarray      # dataset indices


def draw_batch(infrared: np.ndarray, visible: np.ndarray, model: PIDModel, seed: int, iteration: int,
               elements: Sequence[int], flip: bool = True) -> Batch:
    """Per-element sampling of data index, flip, timestep and noise from (seed, iteration, element)."""
    n, H, W = infrared.shape
    f = model.codec.factor
    latent = (model.codec.latent_c, H // f, W // f)
    irs, viss, ts, epss, idx = [], [], [], [], []
    for e in elements:
        rng = element_rng(seed, iteration, int(e))
        i = int(rng.integers(n))
        ir, vis = infrared[i], visible[i]
        if flip and rng.random() < 0.5:
            ir, vis = ir[:, ::-1], vis[:, ::-1]
        irs.append(ir)
        viss.append(vis)
        ts.append(int(rng.integers(1, model.sched.T_steps + 1)))
        epss.append(rng.standard_normal(latent))
        idx.append(i)
    return Batch(np.stack(irs), np.stack(viss), np.array(ts), np.stack(epss), np.array(idx))


def pid_objective(model: PIDModel, batch: Batch, weights: LossWeights, physics_max_t: Optional[int] = None,
                  log_physics: bool = True) -> Tuple[Tensor, StepResult]:
    """Combined loss of one (micro-)batch as a graph, plus its logged breakdown.

    When a physics weight is zero the corresponding term is left out of the
    graph entirely and only evaluated (without a graph) for logging.
    """
    dtype = model.dtype
    x0 = Tensor(batch.infrared[:, None], dtype=dtype)
    with no_grad():
        z0 = model.codec.encode(x0).data
    if batch.eps.shape != z0.shape:
        raise ValueError(f"noise shape {batch.eps.shape} does not match latent {z0.shape}")
    eps = batch.eps.astype(dtype)
    z_t = forward_diffuse(z0, batch.t, eps, model.sched).astype(dtype)
    cond = model.conditioner(rgb_to_tensor(batch.visible, dtype=dtype))
    eps_hat = model.denoiser(Tensor(z_t), batch.t, cond)
    l_noise = loss_noise(eps, eps_hat)
    total = l_noise

    mask_w = None
    if physics_max_t is not None:
        keep = (batch.t <= physics_max_t).astype(np.float64)
        mask_w = keep / keep.sum() if keep.sum() > 0 else None

    def physics_terms(eps_pred: Tensor):
        z0_hat = predict_x0(Tensor(z_t), eps_pred, batch.t, model.sched)
        return physics_losses(model.codec.decode(z0_hat), x0, model.tevnet, mask_w)

    physics_active = weights.physics and not (physics_max_t is not None and mask_w is None)
    l_rec_v = l_tev_v = float("nan")
    if physics_active:
        l_rec, l_tev = physics_terms(eps_hat)
        if weights.k1 > 0:
            total = total + l_rec * weights.k1
        if weights.k2 > 0:
            total = total + l_tev * weights.k2
        l_rec_v, l_tev_v = l_rec.item(), l_tev.item()
    elif log_physics and model.tevnet is not None and model.tevnet.frozen:
        with no_grad():
            l_rec, l_tev = physics_terms(eps_hat.detach())
        l_rec_v, l_tev_v = l_rec.item(), l_tev.item()
    elif weights.physics:
        l_rec_v = l_tev_v = 0.0

    return total, StepResult(total.item(), l_noise.item(), l_rec_v, l_tev_v)


def pid_training_step(model: PIDModel, batch: Batch, weights: LossWeights, physics_max_t: Optional[int] = None,
                      loss_scale: float = 1.0, log_physics: bool = True) -> StepResult:
    """Forward pass, combined loss and backward for one (micro-)batch.

    Gradients accumulate on the trainable parameters. ``loss_scale`` divides
    the loss for gradient accumulation.
    """
    total, result = pid_objective(model, batch, weights, physics_max_t, log_physics)
    scaled = total * (1.0 / loss_scale) if loss_scale != 1.0 else total
    scaled.backward()
    return result


def combined_loss(result: StepResult, weights: LossWeights) -> float:
    """Recompute the total from its parts (NaN parts count as zero)."""
    rec = 0.0 if np.isnan(result.l_rec) else result.l_rec
    tev = 0.0 if np.isnan(result.l_tev) else result.l_tev
    return result.l_noise + weights.k1 * rec + weights.k2 * tev


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CODEC_KINDS = {"identity": 0, "learned": 1}
COND_KINDS = {"mlp": 0, "encoder": 1}


def model_state(model: PIDModel) -> Dict[str, np.ndarray]:
    d, c, k = model.denoiser, model.conditioner, model.codec
    state = {f"denoiser.{n}": v for n, v in d.state_dict().items()}
    if c.kind == "mlp":
        state.update({f"conditioner.{n}": v for n, v in c.state_dict().items()})
    if k.kind == "learned":
        state.update({f"codec.{n}": v for n, v in k.state_dict().items()})
    state["meta.denoiser"] = np.array([d.latent_c, d.cond_c, *d.widths, d.temb_dim], dtype=np.float64)
    if c.kind == "mlp":
        state["meta.conditioner"] = np.array([0, c.factor, c.out_c, c.l1.out_ch], dtype=np.float64)
    else:
        state["meta.conditioner"] = np.array([1, 0, 0, 0], dtype=np.float64)
    if k.kind == "learned":
        state["meta.codec"] = np.array([1, k.factor, k.latent_c, k.width], dtype=np.float64)
    else:
        state["meta.codec"] = np.array([0, 1, 1, 0], dtype=np.float64)
    s = model.sched
    state["meta.schedule"] = np.array([s.T_steps, s.beta[1], s.beta[-1]], dtype=np.float64)
    return state


def codec_state(codec: ConvCodec) -> Dict[str, np.ndarray]:
    state = {f"codec.{n}": v for n, v in codec.state_dict().items()}
    state["meta.codec"] = np.array([1, codec.factor, codec.latent_c, codec.width], dtype=np.float64)
    return state


def codec_from_state(state: Dict[str, np.ndarray]) -> Module:
    kind, factor, latent_c, width = (int(v) for v in state["meta.codec"])
    if kind == 0:
        return IdentityCodec()
    codec = ConvCodec(factor, latent_c, width)
    weights = {n[len("codec."):]: v for n, v in state.items() if n.startswith("codec.")}
    codec.astype(next(iter(weights.values())).dtype)
    codec.load_state_dict(weights)
    codec.freeze()
    return codec


def model_from_state(state: Dict[str, np.ndarray], tevnet: Optional[TeVNet] = None) -> PIDModel:
    for key in ("meta.denoiser", "meta.conditioner", "meta.codec", "meta.schedule"):
        if key not in state:
            raise KeyError(f"checkpoint lacks {key}")
    codec = codec_from_state(state)
    ck, cf, cc, ch = (int(v) for v in state["meta.conditioner"])
    if ck == 0:
        conditioner = MLPConditioner(cf, cc, hidden=ch)
        conditioner.load_state_dict({n[len("conditioner."):]: v for n, v in state.items()
                                     if n.startswith("conditioner.")})
    else:
        conditioner = EncoderConditioner(codec)
    md = state["meta.denoiser"].astype(int)
    denoiser = Denoiser(int(md[0]), int(md[1]), widths=tuple(md[2:4]), temb_dim=int(md[4]))
    weights = {n[len("denoiser."):]: v for n, v in state.items() if n.startswith("denoiser.")}
    dtype = next(iter(weights.values())).dtype
    denoiser.astype(dtype)
    conditioner.astype(dtype)
    denoiser.load_state_dict(weights)
    T, b1, bT = state["meta.schedule"]
    sched = build_linear_schedule(int(T), float(b1), float(bT))
    return PIDModel(denoiser, conditioner, codec, sched, tevnet)


def checkpoint_name(iteration: int) -> str:
    return f"pid_{iteration:07d}.ckpt"


def save_training_checkpoint(path, model: PIDModel, opt: AdamW, iteration: int) -> None:
    state = model_state(model)
    state.update(opt.state_arrays("optim"))
    state["meta.iteration"] = np.array([iteration], dtype=np.float64)
    save_checkpoint(path, state)


def load_model(path, tevnet: Optional[TeVNet] = None) -> Tuple[PIDModel, Dict[str, np.ndarray]]:
    state = load_checkpoint(path)
    return model_from_state(state, tevnet), state


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

LOG_HEADER = "iteration\tl_noise\tl_rec\tl_tev\ttotal\n"


@dataclass
class TrainResult:
    model: PIDModel
    log: List[Dict[str, float]]
    iteration: int
    optimizer: AdamW


def train(model: PIDModel, infrared: np.ndarray, visible: np.ndarray, config: TrainConfig,
          out_dir=None, resume_state: Optional[Dict[str, np.ndarray]] = None,
          progress: Optional[Callable[[Dict[str, float]], None]] = None) -> TrainResult:
    """Optimise the denoiser (and a trainable conditioner) for ``config.iterations`` updates.

    Each update accumulates ``config.accumulation`` micro-batches whose losses
    are divided by the accumulation factor, so the update matches one batch of
    the effective size. With ``resume_state`` (a checkpoint dict) the
    optimiser state and iteration counter continue from the checkpoint.
    """
    config.validate()
    infrared = np.asarray(infrared)
    visible = np.asarray(visible)
    if len(infrared) == 0:
        raise ValueError("training needs a non-empty dataset")
    if len(visible) != len(infrared):
        raise ValueError("infrared and visible sets differ in length")
    if config.weights.physics:
        _require_frozen(model.tevnet)
    frozen_before = model.frozen_hash()
    opt = AdamW(model.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    start = 0
    if resume_state is not None:
        opt.load_state_arrays(resume_state, "optim")
        start = int(resume_state["meta.iteration"][0])
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.tsv"
        log_fh = open(log_path, "a" if resume_state is not None and log_path.exists() else "w", encoding="utf-8")
        if log_fh.tell() == 0:
            log_fh.write(LOG_HEADER)
    records: List[Dict[str, float]] = []
    b, a = config.batch_size, config.accumulation
    try:
        for it in range(start + 1, start + config.iterations + 1):
            opt.zero_grad()
            parts = []
            for k in range(a):
                batch = draw_batch(infrared, visible, model, config.seed, it, range(k * b, (k + 1) * b), config.flip)
                parts.append(pid_training_step(model, batch, config.weights, config.physics_max_t,
                                               loss_scale=a,
                                               log_physics=config.log_physics and it % config.log_every == 0))
            opt.step()
            if it % config.log_every == 0 or it == start + config.iterations:
                rec = {"iteration": it}
                for key in ("l_noise", "l_rec", "l_tev", "total"):
                    rec[key] = float(np.mean([getattr(p, key) for p in parts]))
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(f"{it}\t{rec['l_noise']:.8g}\t{rec['l_rec']:.8g}\t{rec['l_tev']:.8g}\t{rec['total']:.8g}\n")
                    log_fh.flush()
                if progress is not None:
                    progress(rec)
            if out_dir is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                save_training_checkpoint(out_dir / checkpoint_name(it), model, opt, it)
    finally:
        if log_fh is not None:
            log_fh.close()
    end = start + config.iterations
    if out_dir is not None:
        save_training_checkpoint(out_dir / checkpoint_name(end), model, opt, end)
    if model.frozen_hash() != frozen_before:
        raise FrozenParameterError("frozen weights changed during training")
    return TrainResult(model, records, end, opt)
