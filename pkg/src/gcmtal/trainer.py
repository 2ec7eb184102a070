"""Minibatch SGD training with neighborhood sampling, plus checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from gcmtal.core import validate_unit
from gcmtal.gcm import GcmConfig
from gcmtal.graphbuild import GraphParams, build_graph
from gcmtal.heads import (
    DetectorModel,
    HeadConfig,
    TargetConfig,
    VideoBatch,
    concat_batches,
    prepare_video,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GCMTALCK"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.001
    lr_decay_every: int = 15
    decay_factor: float = 0.1
    epochs: int = 30
    batch: int = 1
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    lambda1: float = 0.5
    lambda2: float = 0.5
    sample_neighbors: bool = True
    verify_graph_cache: bool = False

    def __post_init__(self):
        if self.initial_lr < 0 or self.epochs < 0 or self.batch < 1 or self.lr_decay_every < 1:
            raise ValueError("invalid training configuration")


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    return cfg.initial_lr * cfg.decay_factor ** (epoch // cfg.lr_decay_every)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_cls: float
    l_com: float
    l_reg: float
    l_total: float
    wall_time: float

    def log_line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr!r} l_cls={self.l_cls:.6f} "
                f"l_com={self.l_com:.6f} l_reg={self.l_reg:.6f} l_total={self.l_total:.6f} "
                f"wall={self.wall_time:.3f}")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    checkpoint: Optional[str] = None

    @property
    def losses(self) -> list[float]:
        return [e.l_total for e in self.epochs]


def prepare_dataset(ds, graph_params: GraphParams, head_cfg: HeadConfig,
                    target_cfg: TargetConfig = TargetConfig(), with_targets: bool = True,
                    embed=None) -> list[VideoBatch]:
    """Validate every unit and build each video's graph once."""
    batches = []
    for vid, units in ds.units.items():
        for u in units:
            validate_unit(u, ds.feature_dim)
        gts = ds.ground_truths.get(vid, []) if with_targets else None
        batches.append(prepare_video(units, graph_params, head_cfg, gts, target_cfg, embed))
    return batches


def fit(batches: list[VideoBatch], model: DetectorModel, cfg: TrainConfig = TrainConfig(),
        graph_params: Optional[GraphParams] = None, units_by_video: Optional[list] = None,
        log_fn=None) -> TrainReport:
    """Train ``model`` in place on prepared video batches.

    ``graph_params``/``units_by_video`` are only needed when
    ``cfg.verify_graph_cache`` asks for the cached graphs to be rebuilt and
    compared every epoch.
    """
    params = model.parameters()
    velocity = [np.zeros_like(p.value) for p in params]
    report = TrainReport()
    n = len(batches)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        if cfg.verify_graph_cache and units_by_video is not None:
            for b, units in zip(batches, units_by_video):
                if build_graph(units, graph_params).digest() != b.graph.digest():
                    raise RuntimeError(f"cached graph of {b.video_ids[0]} is stale")
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(4)
        steps = 0
        for step, lo in enumerate(range(0, n, cfg.batch)):
            batch = concat_batches([batches[i] for i in order[lo:lo + cfg.batch]])
            rng = np.random.default_rng([cfg.seed, epoch, step, 17])
            model.zero_grad()
            losses = model.loss_and_grad(batch, True, rng, cfg.lambda1, cfg.lambda2,
                                         sample=cfg.sample_neighbors)
            if not np.isfinite(losses.l_total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: cls={losses.l_cls} "
                    f"com={losses.l_com} reg={losses.l_reg}; lower the learning rate")
            for p, v in zip(params, velocity):
                g = p.grad + cfg.weight_decay * p.value if cfg.weight_decay else p.grad
                v *= cfg.momentum
                v += g
                p.value -= lr * v
            sums += (losses.l_cls, losses.l_com, losses.l_reg, losses.l_total)
            steps += 1
        mean = sums / max(steps, 1)
        rec = EpochRecord(epoch, lr, *mean.tolist(), time.perf_counter() - t0)
        report.epochs.append(rec)
        if log_fn is not None:
            log_fn(rec.log_line())
        log.debug(rec.log_line())
    return report


# ---------------------------------------------------------------------------
# checkpoints


def _config_blob(model: DetectorModel) -> bytes:
    meta = {
        "d": model.d,
        "gcm": dataclasses.asdict(model.gcm_cfg),
        "head": dataclasses.asdict(model.head_cfg),
    }
    return json.dumps(meta, sort_keys=True).encode()


def save_checkpoint(model: DetectorModel, path: str) -> None:
    """Binary container: magic, version, JSON config, then shape-tagged float64 tensors."""
    meta = _config_blob(model)
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
            fh.write(np.ascontiguousarray(p.value, "<f8").tobytes())


def load_checkpoint(path: str) -> DetectorModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    try:
        version, mlen = struct.unpack_from("<II", blob, pos)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        pos += 8
        meta = json.loads(blob[pos:pos + mlen])
        pos += mlen
        gcm = meta["gcm"]
        if gcm.get("hidden_dims") is not None:
            gcm["hidden_dims"] = tuple(gcm["hidden_dims"])
        model = DetectorModel(meta["d"], GcmConfig(**gcm), HeadConfig(**meta["head"]),
                              np.random.default_rng(0))
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        params = {p.name: p for p in model.parameters()}
        if count != len(params):
            raise CheckpointError(f"checkpoint holds {count} tensors, model needs {len(params)}")
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(blob, "<f8", size, pos).reshape(shape)
            pos += 8 * size
            p = params[name]
            if p.value.shape != tuple(shape):
                raise CheckpointError(f"tensor {name} has shape {shape}, expected {p.value.shape}")
            p.value[...] = data
    except (struct.error, KeyError, ValueError) as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint {path}: {err}")
    return model


def dump_checkpoint(model: DetectorModel) -> str:
    lines = [f"# config {_config_blob(model).decode()}"]
    for p in model.parameters():
        lines.append(f"{p.name} shape={'x'.join(map(str, p.value.shape))} "
                     f"norm={float(np.linalg.norm(p.value))!r}")
        for row in np.atleast_2d(p.value):
            lines.append("  " + " ".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"
