"""Two-stage training and the no-pretraining baseline."""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from ..dataset_io import Checkpoint
from ..nn_core import Parameter, Tensor, adam_step, no_grad
from ..semantic_codec import chamfer
from .config import ExperimentConfig, config_to_dict
from .model import PreparedCloud, SemComModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _snr_for_batch(cfg: ExperimentConfig, rng: np.random.Generator) -> float:
    if cfg.snr_schedule == "random":
        # experimental: uniform over a 10 dB window centred on the configured SNR
        return float(rng.uniform(cfg.snr_db - 5.0, cfg.snr_db + 5.0))
    return cfg.snr_db


def _run_epochs(model: SemComModel, data: Sequence[PreparedCloud], cfg: ExperimentConfig, epochs: int,
                trainable: list[Parameter], *, codec: bool, noisy: bool, tag: int,
                cached: dict | None = None) -> tuple[list[float], dict]:
    """Adam over shuffled mini-batches; returns per-epoch mean Chamfer distance.

    ``cached`` maps cloud name -> (local, global) arrays from frozen encoders,
    so only the channel codec and decoder are re-run.
    """
    shuffle_rng = np.random.default_rng([cfg.seed, tag, 1])
    noise_rng = np.random.default_rng([cfg.seed, tag, 2])
    history: list[float] = []
    n = len(data)
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = [data[i] for i in order[start:start + cfg.batch_size]]
            snr = _snr_for_batch(cfg, noise_rng) if noisy else None
            for p in trainable:
                p.grad = None
            for m in range(0, len(batch), cfg.micro_batch):
                micro = batch[m:m + cfg.micro_batch]
                if cached is None:
                    local, glob = model.encode(micro)
                else:
                    local = Tensor(np.stack([cached[p.name][0] for p in micro]))
                    glob = Tensor(np.stack([cached[p.name][1] for p in micro])) if model.global_branch else None
                recon = model.decode(model.channel(local, snr, noise_rng, codec), glob, micro)
                loss = chamfer(np.stack([p.cloud for p in micro]), recon) * (len(micro) / len(batch))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                total += value * len(batch)
                loss.backward()
            adam_step(trainable, cfg.lr)
        history.append(total / n)
        log.info("epoch %d/%d mean chamfer %.6f", epoch + 1, epochs, history[-1])
    state = {"shuffle": shuffle_rng.bit_generator.state, "noise": noise_rng.bit_generator.state}
    return history, state


def _checkpoint(model: SemComModel, cfg: ExperimentConfig, stage: str, history, rng_state) -> Checkpoint:
    return Checkpoint(model.state_dict(), stage, _jsonable(rng_state), config_to_dict(cfg), list(history))


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, np.integer):
        return int(state)
    return state


def build_model(cfg: ExperimentConfig, ckpt: Checkpoint | None = None) -> SemComModel:
    model = SemComModel(cfg)
    if ckpt is not None:
        model.load_state_dict(ckpt.params)
    return model


def train_stage1(cfg: ExperimentConfig, clouds, names=None, epochs: int | None = None) -> Checkpoint:
    """Noise-free training of both semantic encoders and the decoder (no channel codec)."""
    epochs = cfg.epochs_stage1 if epochs is None else epochs
    model = build_model(cfg)
    data = model.prepare(clouds, names)
    trainable = model.semantic_encoder_parameters() + model.decoder.parameters()
    history, state = _run_epochs(model, data, cfg, epochs, trainable, codec=False, noisy=False, tag=1)
    return _checkpoint(model, cfg, "stage1", history, state)


def encode_frozen(model: SemComModel, data: Sequence[PreparedCloud]) -> dict:
    cached = {}
    with no_grad():
        for p in data:
            local, glob = model.encode([p])
            cached[p.name] = (local.data[0], None if glob is None else glob.data[0])
    return cached


def train_stage2(cfg: ExperimentConfig, stage1: Checkpoint, clouds, names=None,
                 epochs: int | None = None) -> Checkpoint:
    """Freeze the semantic encoders; train channel codec and decoder through AWGN."""
    if stage1.stage != "stage1":
        raise ValueError(f"stage 2 needs a stage1 checkpoint, got {stage1.stage!r}")
    epochs = cfg.epochs_stage2 if epochs is None else epochs
    model = build_model(cfg, stage1)
    for p in model.semantic_encoder_parameters():
        p.frozen = True
    data = model.prepare(clouds, names)
    cached = encode_frozen(model, data)
    trainable = model.channel_parameters() + model.decoder.parameters()
    history, state = _run_epochs(model, data, cfg, epochs, trainable, codec=True, noisy=True, tag=2,
                                 cached=cached)
    return _checkpoint(model, cfg, "stage2", history, state)


def train_from_scratch(cfg: ExperimentConfig, clouds, names=None, epochs: int | None = None) -> Checkpoint:
    """Baseline without pretraining: everything trained jointly with noise from the start."""
    epochs = cfg.epochs_stage1 + cfg.epochs_stage2 if epochs is None else epochs
    model = build_model(cfg)
    data = model.prepare(clouds, names)
    history, state = _run_epochs(model, data, cfg, epochs, model.parameters(), codec=True, noisy=True, tag=3)
    return _checkpoint(model, cfg, "scratch", history, state)
