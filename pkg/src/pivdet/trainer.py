"""Optimization loop: AdamW with decoupled weight decay, OneCycle schedule,
gradient accumulation over the batch, checkpointing and seeded determinism.

Checkpoint files are named-tensor archives (little-endian): magic "NTAR",
version u16, config hash u64, step u64, entry count u32, then per entry
name length u32 + name bytes, rank u32, dims u32 each, f32 payload.
Optimizer moments ride along under "opt.m." / "opt.v." prefixes so a
resumed run continues bit-exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, backward
from .head import NumericError
from .preprocess import PcaModel

ARCHIVE_MAGIC = b"NTAR"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.005
    weight_decay: float = 0.01
    onecycle_peak: float = 0.05
    momentum_range: tuple = (0.85, 0.95)
    epochs: int = 30
    batch_size: int = 2
    seed: int = 0
    steps: int | None = None            # overrides epochs when set
    deterministic: bool = True
    initial_div: float = 10.0
    final_div: float = 1000.0
    grad_clip: float | None = 10.0      # global gradient norm bound

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.onecycle_peak < self.lr:
            raise ValueError("peak learning rate must be >= base lr")


def config_hash(obj) -> int:
    digest = hashlib.sha256(repr(obj).encode()).digest()
    return struct.unpack("<Q", digest[:8])[0]


# ----------------------------------------------------------------- schedule

def onecycle_lr(step: int, total: int, peak: float, initial_div: float = 10.0,
                final_div: float = 1000.0, momentum_range=(0.85, 0.95)):
    """Cosine ramp to the peak over the first 40% of steps (momentum high to
    low), then cosine anneal to peak/final_div (momentum back up)."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    step = min(step, total)
    split = 0.4 * total
    m_low, m_high = momentum_range
    if step <= split:
        frac = step / split if split > 0 else 1.0
        start = peak / initial_div
        lr = start + (peak - start) * 0.5 * (1 - np.cos(np.pi * frac))
        momentum = m_high + (m_low - m_high) * 0.5 * (1 - np.cos(np.pi * frac))
    else:
        frac = (step - split) / (total - split)
        end = peak / final_div
        lr = end + (peak - end) * 0.5 * (1 + np.cos(np.pi * frac))
        momentum = m_low + (m_high - m_low) * 0.5 * (1 - np.cos(np.pi * frac))
    return float(lr), float(momentum)


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for name in store.names():
        g = store.grad(name)
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = np.float32(max_norm / norm)
        for name in store.names():
            store.grad(name)[...] *= scale
    return norm


# -------------------------------------------------------------------- AdamW

@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(store: ParamStore, state: AdamWState, lr: float,
               betas=(0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8) -> None:
    """Decoupled weight-decay Adam update with bias correction."""
    state.t += 1
    b1, b2 = betas
    for name in store.names():
        if not store.trainable(name):
            continue
        g = store.grad(name)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.t)
        v_hat = v / (1 - b2 ** state.t)
        value = store.get(name)
        value = value * (1.0 - lr * weight_decay) - \
            lr * m_hat / (np.sqrt(v_hat) + eps)
        store.set(name, value)


# ---------------------------------------------------------------- archives

def save_archive(path, tensors: dict, cfg_hash: int = 0, step: int = 0) -> None:
    parts = [ARCHIVE_MAGIC,
             struct.pack("<HQQI", ARCHIVE_VERSION, cfg_hash, step,
                         len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{max(1, arr.ndim)}I",
                                 *(arr.shape if arr.ndim else (1,))))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_archive(path):
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: not a named-tensor archive")
    version, cfg_hash, step, count = struct.unpack("<HQQI", data[4:26])
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: unsupported version {version}")
    pos = 26
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        dims = struct.unpack(f"<{max(1, rank)}I",
                             data[pos:pos + 4 * max(1, rank)])
        pos += 4 * max(1, rank)
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data[pos:pos + 4 * size], dtype="<f4")
        pos += 4 * size
        tensors[name] = arr.reshape(dims if rank else ()).copy()
    return tensors, cfg_hash, step


def save_pca(pca: PcaModel, path, cfg_hash: int = 0) -> None:
    save_archive(path, {"pca.mean": pca.mean, "pca.components": pca.components,
                        "pca.ratios": pca.explained_variance_ratio}, cfg_hash)


def load_pca(path) -> PcaModel:
    tensors, _, _ = load_archive(path)
    return PcaModel(mean=tensors["pca.mean"].astype(np.float64),
                    components=tensors["pca.components"].astype(np.float64),
                    explained_variance_ratio=tensors["pca.ratios"].astype(
                        np.float64))


def checkpoint_tensors(store: ParamStore, state: AdamWState,
                       pca: PcaModel | None = None) -> dict:
    tensors = {name: store.get(name) for name in store.names()}
    for name, m in state.m.items():
        tensors[f"opt.m.{name}"] = m
        tensors[f"opt.v.{name}"] = state.v[name]
    if pca is not None:
        tensors["pca.mean"] = pca.mean
        tensors["pca.components"] = pca.components
        tensors["pca.ratios"] = pca.explained_variance_ratio
    return tensors


def restore_checkpoint(tensors: dict, store: ParamStore,
                       state: AdamWState | None = None):
    pca = None
    if "pca.mean" in tensors:
        pca = PcaModel(mean=tensors["pca.mean"].astype(np.float64),
                       components=tensors["pca.components"].astype(np.float64),
                       explained_variance_ratio=tensors["pca.ratios"].astype(
                           np.float64))
    for name, arr in tensors.items():
        if name.startswith(("opt.", "pca.")):
            continue
        if name in store:
            store.set(name, arr)
        else:
            store.add(name, arr)
    if state is not None:
        for name, arr in tensors.items():
            if name.startswith("opt.m."):
                state.m[name[len("opt.m."):]] = arr.copy()
            elif name.startswith("opt.v."):
                state.v[name[len("opt.v."):]] = arr.copy()
    return pca


# ------------------------------------------------------------------- train

@dataclass
class TrainResult:
    steps: int
    log_rows: list                  # (step, lr, cls, reg, dir, total)
    checkpoint_path: str | None = None

    def log_csv(self) -> str:
        lines = ["step,lr,cls,reg,dir,total"]
        for row in self.log_rows:
            lines.append(",".join(f"{v:.6g}" if i else str(int(v))
                                  for i, v in enumerate(row)))
        return "\n".join(lines) + "\n"


def train(detector, samples, config: TrainConfig, pca: PcaModel | None = None,
          checkpoint_path=None, log_path=None, resume_from=None,
          halt_at: int | None = None) -> TrainResult:
    """Run the optimization loop over preprocessed scene samples.

    Deterministic given (config, samples): fixed round-robin scene order,
    gradient accumulation in batch order, single-threaded math.  On NaN the
    last good checkpoint is written before raising.  `halt_at` interrupts
    after that many steps without altering the schedule, so a later resume
    continues the identical run.
    """
    store = detector.store
    state = AdamWState()
    start_step = 0
    cfg_h = config_hash((detector.config, config))
    if resume_from is not None:
        tensors, _, saved_step = load_archive(resume_from)
        restore_checkpoint(tensors, store, state)
        state.t = saved_step
        start_step = saved_step

    n = len(samples)
    steps_per_epoch = max(1, int(np.ceil(n / config.batch_size)))
    total = config.steps if config.steps is not None \
        else config.epochs * steps_per_epoch
    stop = total if halt_at is None else min(halt_at, total)
    log_rows = []
    last_good = checkpoint_tensors(store, state, pca)

    for step in range(start_step, stop):
        lr, momentum = onecycle_lr(step, total, config.onecycle_peak,
                                   config.initial_div, config.final_div,
                                   config.momentum_range)
        store.zero_grads()
        batch = [samples[(step * config.batch_size + i) % n]
                 for i in range(config.batch_size)]
        sums = {"cls": 0.0, "reg": 0.0, "dir": 0.0, "total": 0.0}
        for sample in batch:
            leaves = store.leaves()
            losses = detector.loss(sample, leaves)
            backward(losses["total"])
            store.accumulate(leaves, scale=1.0 / len(batch))
            for k in sums:
                sums[k] += float(losses[k].value) / len(batch)
        try:
            if config.grad_clip is not None:
                clip_gradients(store, config.grad_clip)
            adamw_step(store, state, lr, betas=(momentum, 0.999),
                       weight_decay=config.weight_decay)
        except NumericError:
            if checkpoint_path is not None:
                save_archive(checkpoint_path, last_good, cfg_h, step)
            raise
        log_rows.append((step, lr, sums["cls"], sums["reg"], sums["dir"],
                         sums["total"]))
        last_good = checkpoint_tensors(store, state, pca)

    result = TrainResult(steps=stop, log_rows=log_rows)
    if checkpoint_path is not None:
        save_archive(checkpoint_path, last_good, cfg_h, stop)
        result.checkpoint_path = str(checkpoint_path)
    if log_path is not None:
        Path(log_path).write_text(result.log_csv())
    return result
