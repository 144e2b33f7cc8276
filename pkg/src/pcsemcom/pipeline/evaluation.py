"""Evaluation sweeps over SNR, rate and global-feature width, with CSV output."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .. import metrics
from ..channel_link import RateReport, rate_report
from ..dataset_io import Checkpoint
from ..semantic_codec import chamfer
from .config import ExperimentConfig
from .training import build_model, train_stage1, train_stage2

CSV_SCHEMA = "pcsemcom-sweep/1"
CSV_COLUMNS = ("snr_db", "bpp", "symbols_per_point", "d1_psnr_db", "d2_psnr_db",
               "d1_psnr_symmetric_db", "d2_psnr_symmetric_db", "cd", "wall_ms")


@dataclass
class SweepRow:
    snr_db: float
    rate: RateReport
    d1_psnr_db: float
    d2_psnr_db: float
    d1_psnr_symmetric_db: float
    d2_psnr_symmetric_db: float
    cd: float
    wall_ms: float
    deltas: dict = field(default_factory=dict)

    def values(self, record_timing: bool = True) -> dict:
        return {
            "snr_db": self.snr_db,
            "bpp": self.rate.bits_per_point,
            "symbols_per_point": self.rate.symbols_per_point,
            "d1_psnr_db": metrics.display_psnr(self.d1_psnr_db),
            "d2_psnr_db": metrics.display_psnr(self.d2_psnr_db),
            "d1_psnr_symmetric_db": metrics.display_psnr(self.d1_psnr_symmetric_db),
            "d2_psnr_symmetric_db": metrics.display_psnr(self.d2_psnr_symmetric_db),
            "cd": self.cd,
            "wall_ms": self.wall_ms if record_timing else 0.0,
        }


@dataclass
class SweepResult:
    rows: list[SweepRow]

    def to_csv(self, path=None, record_timing: bool = True) -> str:
        """Render (and optionally write) the CSV.

        The first line is a ``# schema`` tag; config deltas of sweep points
        come first, then the fixed :data:`CSV_COLUMNS`.
        """
        delta_cols = list(dict.fromkeys(k for r in self.rows for k in r.deltas))
        buf = io.StringIO()
        buf.write(f"# schema: {CSV_SCHEMA}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(delta_cols + list(CSV_COLUMNS))
        for r in self.rows:
            vals = r.values(record_timing)
            writer.writerow([_fmt(r.deltas.get(c, "")) for c in delta_cols] + [_fmt(vals[c]) for c in CSV_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text


def _fmt(value) -> str:
    if isinstance(value, float):
        value = float(value)
        return repr(round(value, 6)) if math.isfinite(value) else repr(value)
    return str(value)


def read_sweep_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _mean(values: list[float]) -> float:
    return math.inf if any(math.isinf(v) for v in values) else float(np.mean(values))


def evaluate_model(ckpt: Checkpoint, cfg: ExperimentConfig, clouds, snr_list: Iterable[float],
                   names=None, trials: int | None = None) -> SweepResult:
    """Run the full transmit chain over ``clouds`` for every SNR with fixed weights.

    A stage-1 checkpoint has no trained channel code, so its normalised
    local features are sent as channel symbols directly.  The same noise
    draws (scaled by the SNR) are reused across SNR points.
    """
    trials = cfg.eval_trials if trials is None else trials
    model = build_model(cfg, ckpt)
    codec = ckpt.stage != "stage1"
    data = model.prepare(clouds, names)
    rows = []
    for snr in snr_list:
        snr = float(snr)
        start = time.perf_counter()
        reports, cds = [], []
        for trial in range(trials):
            rng = np.random.default_rng([cfg.seed, 7, trial])
            for p in data:
                recon = model.reconstruct(p, snr, rng, codec)
                reports.append(metrics.evaluate(p.cloud, recon, cfg.normal_k))
                cds.append(float(chamfer(p.cloud, recon).data))
        wall = (time.perf_counter() - start) * 1000.0 / max(1, len(reports))
        rate = rate_report(cfg.S, cfg.d, cfg.D_prime, cfg.N, snr, cfg.success_p, cfg.bits_per_param)
        rows.append(SweepRow(
            snr, rate,
            _mean([q.d1_psnr_db for q in reports]), _mean([q.d2_psnr_db for q in reports]),
            _mean([q.d1_psnr_symmetric_db for q in reports]), _mean([q.d2_psnr_symmetric_db for q in reports]),
            float(np.mean(cds)), wall,
        ))
    return SweepResult(rows)


def ablate_global(ckpt_family: Mapping[int, Checkpoint], cfg: ExperimentConfig, clouds,
                  snr_db: float | None = None, names=None) -> SweepResult:
    """One row per global width ``D'`` (``0`` disables the global branch), sorted by ``D'``."""
    if 0 not in ckpt_family:
        raise ValueError("the ablation needs a D'=0 baseline checkpoint")
    snr = cfg.snr_db if snr_db is None else snr_db
    rows = []
    for d_prime in sorted(ckpt_family):
        sub = cfg.replace(D_prime=d_prime)
        row = evaluate_model(ckpt_family[d_prime], sub, clouds, [snr], names).rows[0]
        row.deltas = {"D_prime": d_prime}
        rows.append(row)
    return SweepResult(rows)


def train_two_stage(cfg: ExperimentConfig, clouds, names=None) -> Checkpoint:
    return train_stage2(cfg, train_stage1(cfg, clouds, names), clouds, names)


def sweep_rate(cfg: ExperimentConfig, train_clouds, test_clouds, pairs: Iterable[tuple[int, int]],
               snr_db: float | None = None) -> SweepResult:
    """Train a two-stage model per ``(S, d)`` and evaluate each at one SNR."""
    snr = cfg.snr_db if snr_db is None else snr_db
    rows = []
    for S, d in pairs:
        sub = cfg.replace(S=S, d=d)
        row = evaluate_model(train_two_stage(sub, train_clouds), sub, test_clouds, [snr]).rows[0]
        row.deltas = {"S": S, "d": d}
        rows.append(row)
    return SweepResult(rows)


def sweep_global(cfg: ExperimentConfig, train_clouds, test_clouds, d_primes: Iterable[int],
                 snr_db: float | None = None) -> SweepResult:
    """Train a two-stage model per ``D'`` and tabulate them with :func:`ablate_global`."""
    family = {dp: train_two_stage(cfg.replace(D_prime=dp), train_clouds) for dp in sorted(set(d_primes) | {0})}
    return ablate_global(family, cfg, test_clouds, snr_db)
