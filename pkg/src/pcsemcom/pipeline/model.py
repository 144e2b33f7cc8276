"""The assembled transmitter/channel/receiver network."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import geometry
from ..channel_link import ChannelDecoder, ChannelEncoder, power_normalize, real_channel_noise
from ..nn_core import Module, Tensor, no_grad
from ..semantic_codec import GlobalBranch, LocalEncoder, SemanticDecoder
from .config import ExperimentConfig


@dataclass
class PreparedCloud:
    """Input-only preprocessing of one cloud, reusable across epochs."""

    name: str
    cloud: np.ndarray       # (N, 3)
    centroids: np.ndarray   # (S, 3)
    grouped: np.ndarray     # (S, K/2, K/4, 3)
    centres: np.ndarray     # (S, K/2, 3)


class SemComModel(Module):
    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.local = LocalEncoder(cfg.K, cfg.d, rng, coord_scale=cfg.coord_scale)
        self.global_branch = (GlobalBranch(cfg.views, cfg.D_prime, rng, cfg.image_size, cfg.splat_sigma,
                                           feature_width=cfg.feature_width)
                              if cfg.D_prime else None)
        self.channel_encoder = ChannelEncoder(cfg.d, rng)
        self.channel_decoder = ChannelDecoder(cfg.d, rng)
        self.decoder = SemanticDecoder(cfg.K, cfg.d, cfg.D_prime, rng, hidden=cfg.decoder_hidden,
                                       coord_scale=cfg.coord_scale)

    # parameter groups ---------------------------------------------------
    def semantic_encoder_parameters(self):
        params = self.local.parameters()
        if self.global_branch is not None:
            params += self.global_branch.parameters()
        return params

    def channel_parameters(self):
        return self.channel_encoder.parameters() + self.channel_decoder.parameters()

    # data ---------------------------------------------------------------
    def prepare(self, clouds, names=None) -> list[PreparedCloud]:
        prepared = []
        for i, cloud in enumerate(clouds):
            ps = geometry.extract_patches(cloud, self.cfg.S)
            grouped, centres = self.local.group(ps.patches)
            name = names[i] if names is not None else str(i)
            prepared.append(PreparedCloud(name, np.asarray(cloud, dtype=np.float64), ps.centroids,
                                          grouped, centres))
        return prepared

    # forward pieces -----------------------------------------------------
    def encode(self, batch: list[PreparedCloud]) -> tuple[Tensor, Tensor | None]:
        b = len(batch)
        grouped = np.concatenate([p.grouped for p in batch])
        centres = np.concatenate([p.centres for p in batch])
        local = self.local.forward_grouped(grouped, centres)
        local = local.reshape(b, self.cfg.S, self.cfg.d)
        glob = None
        if self.global_branch is not None:
            glob = self.global_branch(np.stack([p.cloud for p in batch]))
        return local, glob

    def channel(self, local: Tensor, snr_db: float | None, rng, codec: bool = True) -> Tensor:
        """Normalise, (optionally) channel-code, add AWGN and decode the local features.

        ``codec=False`` is the identity channel code used before stage 2:
        the normalised features themselves are the channel symbols.
        ``snr_db=None`` skips the noise.
        """
        x, _ = power_normalize(local)
        if codec:
            x = self.channel_encoder(x)
            x, _ = power_normalize(x)
        if snr_db is not None and not math.isinf(snr_db):
            x = x + real_channel_noise(x.shape, snr_db, rng)
        if codec:
            x = self.channel_decoder(x)
        return x

    def decode(self, received: Tensor, glob: Tensor | None, batch: list[PreparedCloud]) -> Tensor:
        return self.decoder(received, glob, np.stack([p.centroids for p in batch]))

    def forward(self, batch, snr_db=None, rng=None, codec: bool = True) -> Tensor:
        local, glob = self.encode(batch)
        return self.decode(self.channel(local, snr_db, rng, codec), glob, batch)

    def reconstruct(self, prepared: PreparedCloud, snr_db=None, rng=None, codec: bool = True) -> np.ndarray:
        with no_grad():
            return self.forward([prepared], snr_db, rng, codec).data[0]
