"""Command-line entry point: ``pidiff <command> --config run.cfg [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 stage run out of order
(a required upstream checkpoint is not configured), 4 missing artifact.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .data import (
    generate_dataset,
    load_dataset,
    save_dataset,
    stack_pairs,
    visible_luminance01,
    write_pgm16,
)
from .diffusion import (
    ConvCodec,
    IdentityCodec,
    build_linear_schedule,
    codec_roundtrip,
    codec_train,
    desk_schedule,
    rgb_to_tensor,
    sample,
)
from .metrics import CostModel, MetricReport, emd_1d, macs_count, psnr
from .tensor import FormatError, Tensor, load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .tev import TeVComponents, TeVNet, load_tevnet, reconstruction_errors, save_tevnet, train_tevnet
from .training import (
    LossWeights,
    TrainConfig,
    build_pid_model,
    codec_from_state,
    codec_state,
    load_model,
    model_from_state,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_ORDER, EXIT_MISSING = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _missing(message: str) -> CliError:
    return CliError(EXIT_MISSING, message)


def _write_config(cfg: RunConfig, directory: Path, command: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{command}.cfg").write_text(cfg.dump(), encoding="utf-8")


def _load_split(cfg: RunConfig, split: str):
    directory = cfg.path("dataset_dir") / split
    try:
        pairs = load_dataset(directory)
    except FileNotFoundError as exc:
        raise _missing(f"{exc}; run data-gen first") from None
    except FormatError as exc:
        raise _missing(str(exc)) from None
    if not pairs:
        raise _missing(f"dataset {directory} is empty")
    return pairs


def _existing(cfg: RunConfig, key: str, required_by: str) -> Path:
    path = cfg.path(key)
    if path is None:
        raise CliError(EXIT_ORDER, f"{required_by} needs '{key}' to point at a checkpoint")
    if not path.exists():
        raise _missing(f"{key} {path} does not exist")
    return path


def _schedule(cfg: RunConfig):
    if cfg.beta_1 is None and cfg.beta_T is None:
        return desk_schedule(cfg.T_steps)
    if cfg.beta_1 is None or cfg.beta_T is None:
        raise CliError(EXIT_CONFIG, "set both beta_1 and beta_T or neither")
    return build_linear_schedule(cfg.T_steps, cfg.beta_1, cfg.beta_T)


def _load_codec(cfg: RunConfig):
    if cfg.codec_kind == "identity":
        if cfg.codec_factor != 1:
            raise CliError(EXIT_CONFIG, "codec_kind=identity requires codec_factor=1")
        return IdentityCodec()
    path = _existing(cfg, "codec_checkpoint", "codec_kind=learned")
    return codec_from_state(load_checkpoint(path))


def _latest_checkpoint(cfg: RunConfig) -> Path:
    path = cfg.path("pid_checkpoint")
    if path is not None:
        if not path.exists():
            raise _missing(f"pid_checkpoint {path} does not exist")
        return path
    found = sorted(cfg.output_path().glob("pid_*.ckpt"))
    if not found:
        raise _missing(f"no pid_checkpoint set and no pid_*.ckpt under {cfg.output_path()}")
    return found[-1]


def _samples_dir(cfg: RunConfig, s: int) -> Path:
    return cfg.output_path(f"samples_s{s:03d}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_data_gen(cfg: RunConfig) -> None:
    size = cfg.image_size
    if size % 4 or size < 8:
        raise CliError(EXIT_CONFIG, f"image_size {size} must be a multiple of 4 and at least 8")
    if cfg.n_train < 1 or cfg.n_test < 0:
        raise CliError(EXIT_CONFIG, "n_train must be >= 1 and n_test >= 0")
    pairs = generate_dataset(cfg.n_train + cfg.n_test, size, size, seed=cfg.seed, m=cfg.m)
    root = cfg.path("dataset_dir")
    save_dataset(pairs[:cfg.n_train], root / "train")
    save_dataset(pairs[cfg.n_train:], root / "test")
    _write_config(cfg, root, "data-gen")
    print(f"wrote {cfg.n_train} train and {cfg.n_test} test pairs to {root}")


def cmd_tevnet_train(cfg: RunConfig) -> None:
    train_ir, _ = stack_pairs(_load_split(cfg, "train"))
    test_ir, _ = stack_pairs(_load_split(cfg, "test"))
    model = TeVNet(m=cfg.m, head=cfg.tevnet_head, widths=cfg.tevnet_widths, seed=cfg.seed)
    result = train_tevnet(model, (train_ir + 1.0) / 2.0, cfg.tevnet_epochs, lr=cfg.tevnet_lr, seed=cfg.seed,
                          batch_size=cfg.tevnet_batch)
    heldout = float(np.mean(reconstruction_errors(model, (test_ir + 1.0) / 2.0)))
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    save_tevnet(model, out / "tevnet.ckpt")
    lines = ["epoch\tloss\n"] + [f"{i + 1}\t{v:.8g}\n" for i, v in enumerate(result.history)]
    lines.append(f"heldout\t{heldout:.8g}\n")
    (out / "tevnet_metrics.tsv").write_text("".join(lines), encoding="utf-8")
    _write_config(cfg, out, "tevnet-train")
    print(f"held-out reconstruction MSE {heldout:.3e}; checkpoint {out / 'tevnet.ckpt'}")


def cmd_codec_train(cfg: RunConfig) -> None:
    if cfg.codec_kind != "learned":
        raise CliError(EXIT_CONFIG, "codec-train needs codec_kind=learned")
    train_ir, _ = stack_pairs(_load_split(cfg, "train"))
    test_ir, _ = stack_pairs(_load_split(cfg, "test"))
    try:
        codec = ConvCodec(cfg.codec_factor, cfg.codec_latent_c, seed=cfg.seed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    history = codec_train(codec, train_ir, cfg.codec_epochs, lr=cfg.codec_lr, seed=cfg.seed)
    recon = codec_roundtrip(codec, test_ir)
    quality = float(np.mean([psnr(r, x) for r, x in zip(recon, test_ir)]))
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "codec.ckpt", codec_state(codec))
    lines = ["epoch\tloss\n"] + [f"{i + 1}\t{v:.8g}\n" for i, v in enumerate(history)]
    lines.append(f"heldout_psnr_db\t{quality:.6f}\n")
    (out / "codec_metrics.tsv").write_text("".join(lines), encoding="utf-8")
    _write_config(cfg, out, "codec-train")
    print(f"held-out round-trip PSNR {quality:.2f} dB; checkpoint {out / 'codec.ckpt'}")


def cmd_pid_train(cfg: RunConfig) -> None:
    try:
        weights = LossWeights(cfg.k1, cfg.k2)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    tevnet = None
    if weights.physics:
        tevnet = load_tevnet(_existing(cfg, "tevnet_checkpoint", "pid-train with k1 > 0 or k2 > 0"))
    elif cfg.path("tevnet_checkpoint") is not None:
        tevnet = load_tevnet(_existing(cfg, "tevnet_checkpoint", "pid-train"))
    train_ir, train_vis = stack_pairs(_load_split(cfg, "train"))
    resume_state = None
    if cfg.resume:
        path = cfg.path("resume")
        if not path.exists():
            raise _missing(f"resume checkpoint {path} does not exist")
        resume_state = load_checkpoint(path)
        model = model_from_state(resume_state, tevnet)
    else:
        codec = _load_codec(cfg)
        try:
            model = build_pid_model(train_ir.shape[1], codec, cfg.conditioner, tevnet, _schedule(cfg),
                                    widths=cfg.denoiser_widths, seed=cfg.seed)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from None
    tc = TrainConfig(iterations=cfg.iterations, batch_size=cfg.batch_size, accumulation=cfg.accumulation,
                     lr=cfg.lr, weight_decay=cfg.weight_decay, seed=cfg.seed, weights=weights,
                     physics_max_t=cfg.physics_max_t or None, log_every=cfg.log_every,
                     checkpoint_every=cfg.checkpoint_every)
    try:
        tc.validate()
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = cfg.output_path()
    _write_config(cfg, out, "pid-train")

    def progress(rec: Dict[str, float]) -> None:
        print(f"iter {rec['iteration']}: l_noise {rec['l_noise']:.4f} l_rec {rec['l_rec']:.3e} "
              f"l_tev {rec['l_tev']:.3e} total {rec['total']:.4f}")

    result = train(model, train_ir, train_vis, tc, out_dir=out, resume_state=resume_state, progress=progress)
    print(f"finished at iteration {result.iteration}")


def _trace_to_stderr(s: int) -> Callable[[str], None]:
    # wall-clock timings would break byte-identical artifacts, so the trace is not written to disk
    def emit(line: str) -> None:
        print(f"s={s}\t{line}", file=sys.stderr)
    return emit


def cmd_sample(cfg: RunConfig) -> None:
    model, _ = load_model(_latest_checkpoint(cfg))
    pairs = _load_split(cfg, "test")
    n = min(cfg.n_samples, len(pairs)) if cfg.n_samples > 0 else len(pairs)
    _, visible = stack_pairs(pairs[:n])
    out = cfg.output_path()
    _write_config(cfg, out, "sample")
    for s in cfg.steps:
        if not 1 <= s <= model.sched.T_steps:
            raise CliError(EXIT_CONFIG, f"step count {s} outside [1, {model.sched.T_steps}]")
        images = sample(model.denoiser, model.conditioner, model.codec, visible, s, model.sched, cfg.seed,
                        sampler_kind=cfg.sampler, eta=cfg.eta, sigma_kind=cfg.sigma_kind,
                        batch_size=cfg.sample_batch, trace=_trace_to_stderr(s) if cfg.trace else None)
        directory = _samples_dir(cfg, s)
        directory.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            save_tensor(directory / f"{i:05d}.tsr", img)
            write_pgm16(directory / f"{i:05d}.pgm", img)
        print(f"s={s}: wrote {n} images to {directory}")


def _generated_images(directory: Path, expected: Sequence[int]) -> np.ndarray:
    if not directory.is_dir():
        raise _missing(f"generated set {directory} does not exist")
    found = {}
    for path in sorted(directory.glob("*.tsr")):
        try:
            found[int(path.stem)] = path
        except ValueError:
            continue
    missing = sorted(set(expected) - set(found))
    extra = sorted(set(found) - set(expected))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"generated set lacks indices {missing}")
        if extra:
            parts.append(f"reference set lacks indices {extra}")
        raise _missing("misaligned sets: " + "; ".join(parts))
    return np.stack([load_tensor(found[i]) for i in expected])


def macs_components(model, image_size: int) -> CostModel:
    """Per-image MACs of one conditioner call, one denoiser call and one decode."""
    f = model.codec.factor
    rgb = rgb_to_tensor(np.zeros((1, image_size, image_size, 3)), dtype=model.dtype)
    cond = model.conditioner(rgb)
    z = Tensor(np.zeros((1, model.codec.latent_c, image_size // f, image_size // f)), dtype=model.dtype)
    c = macs_count(model.conditioner, rgb, network=model.conditioner)
    u = macs_count(lambda x: model.denoiser(x, 1, cond), z, network=model.denoiser)
    d = macs_count(model.codec.decode, z, network=model.codec)
    return CostModel(c, u, d)


def cmd_evaluate(cfg: RunConfig) -> None:
    pairs = _load_split(cfg, "test")
    n = min(cfg.n_samples, len(pairs)) if cfg.n_samples > 0 else len(pairs)
    infrared, visible = stack_pairs(pairs[:n])
    gen_dir = cfg.path("generated_dir") or _samples_dir(cfg, cfg.steps[0])
    generated = _generated_images(gen_dir, list(range(n)))
    out = cfg.output_path("evaluation")
    _write_config(cfg, out, "evaluate")

    report = MetricReport()
    for i in range(n):
        report.add(f"{i:05d}", generated[i], infrared[i])
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    agg = report.aggregate()
    print(f"PSNR {agg['psnr_mean']:.3f} dB, SSIM {agg['ssim_mean']:.4f} over {n} images")

    tev_path = cfg.path("tevnet_checkpoint")
    if tev_path is not None:
        if not tev_path.exists():
            raise _missing(f"tevnet_checkpoint {tev_path} does not exist")
        tevnet = load_tevnet(tev_path)
        dists = {
            "visible": reconstruction_errors(tevnet, visible_luminance01(visible)),
            "infrared": reconstruction_errors(tevnet, (infrared + 1.0) / 2.0),
            "generated": reconstruction_errors(tevnet, (generated + 1.0) / 2.0),
        }
        names = list(dists)
        rows = ["index\t" + "\t".join(names) + "\n"]
        rows += [f"{i}\t" + "\t".join(f"{dists[k][i]:.9e}" for k in names) + "\n" for i in range(n)]
        (out / "lrec.tsv").write_text("".join(rows), encoding="utf-8")
        emd_rows = ["a\tb\temd\n"]
        for i, a in enumerate(names):
            for b in names[i:]:
                emd_rows.append(f"{a}\t{b}\t{emd_1d(dists[a], dists[b]):.9e}\n")
        (out / "emd.tsv").write_text("".join(emd_rows), encoding="utf-8")

    ckpt = cfg.path("pid_checkpoint")
    if ckpt is not None:
        if not ckpt.exists():
            raise _missing(f"pid_checkpoint {ckpt} does not exist")
        model, _ = load_model(ckpt)
        cost = macs_components(model, infrared.shape[1])
        rows = ["s\tconditioner\tunet\tdecoder\ttotal\n"]
        rows += [f"{s}\t{cost.conditioner}\t{cost.unet}\t{cost.decoder}\t{int(cost.total(s))}\n"
                 for s in cfg.macs_steps]
        (out / "macs.tsv").write_text("".join(rows), encoding="utf-8")


def cmd_decompose(cfg: RunConfig) -> None:
    tev_path = cfg.path("tevnet_checkpoint")
    if tev_path is None or not tev_path.exists():
        raise _missing(f"tevnet_checkpoint {tev_path or '(unset)'} does not exist")
    tevnet = load_tevnet(tev_path)
    pairs = _load_split(cfg, "test")
    out = cfg.output_path("decompose")
    _write_config(cfg, out, "decompose")
    for i, pair in enumerate(pairs[:cfg.n_images]):
        S = pair.infrared01
        comps = tevnet.decompose(S)
        env = comps.env_field(S) if isinstance(comps, TeVComponents) else comps.phi_env
        err = np.abs(comps.e * comps.T + (1.0 - comps.e) * env - S)
        ranges = []
        for name, arr in (("e", comps.e), ("T", comps.T), ("env", env), ("err", err)):
            lo, hi = write_pgm16(out / f"{i:05d}_{name}.pgm", arr, sidecar=False)
            ranges.append(f"{name}\t{lo!r}\t{hi!r}\n")
        (out / f"{i:05d}.range").write_text("map\tmin\tmax\n" + "".join(ranges), encoding="utf-8")
    print(f"decomposed {min(cfg.n_images, len(pairs))} images into {out}")


COMMANDS: Dict[str, Callable[[RunConfig], None]] = {
    "data-gen": cmd_data_gen,
    "tevnet-train": cmd_tevnet_train,
    "codec-train": cmd_codec_train,
    "pid-train": cmd_pid_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "decompose": cmd_decompose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pidiff", description="Physics-informed infrared diffusion toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.stage and cfg.stage != args.command:
        print(f"config error: config is for stage '{cfg.stage}', not '{args.command}'", file=sys.stderr)
        return EXIT_CONFIG
    cfg.raw["stage"] = args.command
    cfg.values["stage"] = args.command
    try:
        COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
