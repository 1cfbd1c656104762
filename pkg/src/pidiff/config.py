"""Flat ``key=value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Unknown keys and unparsable values are errors that name the file and line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

OUTPUT_ROOT_ENV = "PID_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> Tuple[int, ...]:
    items = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    if not items:
        raise ValueError("empty list")
    return items


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


def _opt_float(text: str) -> Optional[float]:
    return None if text == "" else float(text)


# key -> (parser, default text)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], str]] = {
    "stage": (_choice("", "data-gen", "tevnet-train", "codec-train", "pid-train", "sample", "evaluate",
                      "decompose"), ""),
    "seed": (int, "0"),
    "output_dir": (str, "runs"),
    "dataset_dir": (str, "data"),
    # data
    "image_size": (int, "64"),
    "n_train": (int, "500"),
    "n_test": (int, "100"),
    "m": (int, "4"),
    # decomposition network
    "tevnet_checkpoint": (str, ""),
    "tevnet_head": (_choice("tev", "tes"), "tev"),
    "tevnet_widths": (_int_list, "16,32,64"),
    "tevnet_epochs": (int, "200"),
    "tevnet_lr": (float, "1e-3"),
    "tevnet_batch": (int, "16"),
    # codec and conditioner
    "codec_kind": (_choice("identity", "learned"), "identity"),
    "codec_factor": (int, "1"),
    "codec_latent_c": (int, "4"),
    "codec_checkpoint": (str, ""),
    "codec_epochs": (int, "30"),
    "codec_lr": (float, "1e-3"),
    "conditioner": (_choice("mlp", "encoder"), "mlp"),
    "denoiser_widths": (_int_list, "32,64"),
    # schedule
    "T_steps": (int, "100"),
    "beta_1": (_opt_float, ""),
    "beta_T": (_opt_float, ""),
    # PID training
    "k1": (float, "50"),
    "k2": (float, "5"),
    "physics_max_t": (int, "0"),
    "iterations": (int, "5000"),
    "batch_size": (int, "8"),
    "accumulation": (int, "1"),
    "lr": (float, "1e-3"),
    "weight_decay": (float, "0"),
    "log_every": (int, "50"),
    "checkpoint_every": (int, "1000"),
    "resume": (str, ""),
    # sampling and evaluation
    "pid_checkpoint": (str, ""),
    "sampler": (_choice("ddim", "ddpm"), "ddim"),
    "sigma_kind": (_choice("posterior", "beta"), "posterior"),
    "steps": (_int_list, "20"),
    "eta": (float, "0"),
    "n_samples": (int, "100"),
    "sample_batch": (int, "50"),
    "trace": (_bool, "0"),
    "generated_dir": (str, ""),
    "macs_steps": (_int_list, "2,4,5,10,20,50,100"),
    "n_images": (int, "4"),
}


@dataclass
class RunConfig:
    values: Dict[str, Any]
    raw: Dict[str, str]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __getattr__(self, key: str) -> Any:
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def dump(self) -> str:
        """Every key with its effective value, in schema order; parses back to the same config."""
        return "".join(f"{k}={self.raw[k]}\n" for k in SCHEMA)

    def output_path(self, *parts: str) -> Path:
        return resolve_path(self.values["output_dir"]).joinpath(*parts)

    def path(self, key: str) -> Optional[Path]:
        value = self.values[key]
        return resolve_path(value) if value else None


def resolve_path(value: str) -> Path:
    """Relative paths live under ``$PID_OUTPUT_ROOT`` when it is set."""
    p = Path(value)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _parse_value(key: str, text: str, where: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown key '{key}'")
    parser, _ = SCHEMA[key]
    try:
        return parser(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for '{key}': {exc}") from None


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {text!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        _parse_value(key, value, f"{source}:{lineno}")
        raw[key] = value
    return raw


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    raw = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        raw.update(parse_lines(p.read_text(encoding="utf-8").splitlines(), str(p)))
    raw.update(parse_lines(list(overrides), "--set"))
    values = {k: _parse_value(k, v, "config") for k, v in raw.items()}
    return RunConfig(values, raw)


def config_from_dict(settings: Dict[str, Any]) -> RunConfig:
    lines: List[str] = [f"{k}={v}" for k, v in settings.items()]
    return load_config(None, lines)
