"""Experiment configuration and its INI round trip."""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, fields
from pathlib import Path

from ..dataset_io import DatasetSpec

OUTPUT_DIR_ENV = "PCSEM_OUTPUT_DIR"

# INI section of every field; order here is the order written to disk
_SECTIONS = {
    "model": ("N", "S", "d", "D_prime", "views", "image_size", "splat_sigma", "coord_scale",
              "feature_width", "decoder_hidden"),
    "channel": ("snr_db", "success_p", "bits_per_param", "snr_schedule"),
    "training": ("lr", "batch_size", "micro_batch", "epochs_stage1", "epochs_stage2", "seed"),
    "data": ("data_root", "per_shape", "lo", "hi", "normal_k"),
    "output": ("output_dir", "record_timing", "eval_trials"),
}


@dataclass
class ExperimentConfig:
    N: int = 1024
    S: int = 16
    d: int = 8
    D_prime: int = 4
    views: int = 4
    image_size: int = 64
    splat_sigma: float = 1.0
    coord_scale: float = 8.0
    feature_width: int = 128
    decoder_hidden: int = 256
    snr_db: float = 0.0
    success_p: float = 0.9
    bits_per_param: int = 16
    snr_schedule: str = "fixed"
    lr: float = 5e-4
    batch_size: int = 8
    micro_batch: int = 4
    epochs_stage1: int = 200
    epochs_stage2: int = 50
    seed: int = 0
    data_root: str = "toy"
    per_shape: int = 1
    lo: float = 0.0
    hi: float = 63.0
    normal_k: int = 12
    output_dir: str = "runs"
    record_timing: bool = True
    eval_trials: int = 1

    def __post_init__(self):
        self.validate()

    @property
    def K(self) -> int:
        return 2 * self.N // self.S

    def validate(self) -> None:
        if self.S < 1 or (2 * self.N) % self.S:
            raise ValueError(f"S={self.S} must divide 2N={2 * self.N}")
        if self.K > self.N or self.K % 4:
            raise ValueError(f"patch size K={self.K} must be <= N and divisible by 4")
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.D_prime < 0:
            raise ValueError("D_prime must be >= 0")
        if self.views < 1 or self.batch_size < 1 or self.micro_batch < 1:
            raise ValueError("views, batch_size and micro_batch must be positive")
        if self.snr_schedule not in ("fixed", "random"):
            raise ValueError("snr_schedule must be 'fixed' or 'random'")
        if not 0.0 < self.success_p <= 1.0:
            raise ValueError("success_p must lie in (0, 1]")
        if not self.lo < self.hi:
            raise ValueError("lo must be < hi")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def dataset(self, split: str) -> DatasetSpec:
        return DatasetSpec(self.data_root, split, self.N, self.lo, self.hi, self.seed, self.per_shape)

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)


PRESETS = {
    "desk": ExperimentConfig(),
    "paper": ExperimentConfig(N=8192, S=64, d=8, D_prime=4, views=4, image_size=224, batch_size=24,
                              lr=5e-4, feature_width=512),
}


def field_types() -> dict[str, type]:
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(ExperimentConfig)}


def parse_value(name: str, text: str):
    kind = field_types()[name]
    if kind is bool:
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    return kind(text.strip())


def render_config(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, names in _SECTIONS.items():
        parser[section] = {n: repr(float(getattr(cfg, n))) if isinstance(getattr(cfg, n), float)
                           else str(getattr(cfg, n)) for n in names}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read_string(text)
    known = field_types()
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for name, raw in parser[section].items():
            if name not in known:
                raise ValueError(f"unknown config key {name!r} in [{section}]")
            values[name] = parse_value(name, raw)
    return dataclasses.replace(base or ExperimentConfig(), **values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(render_config(cfg))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(values: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    return ExperimentConfig(**{k: v for k, v in values.items() if k in known})
