"""Adam with cosine annealing, the training loop, and binary checkpoints.

Every step draws its batch and augmentations from ``default_rng([seed, step])``
and the optimizer state is fully captured in the checkpoint, so a resumed run
continues bit-for-bit like an uninterrupted one.

Checkpoint layout (little-endian)::

    b"LPMB" | u32 version | 32-byte config digest | u32 count
    count x ( u32 name length | name (utf-8) | u32 rank | rank x u64 extent | f64 data )
"""

from __future__ import annotations

import io
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import hazegen, kernels, objectives
from .errors import ConfigError, FormatError, NonFiniteError
from .tensor import Tensor, no_grad

MAGIC = b"LPMB"
VERSION = 1
DIGEST_BYTES = 32
LOG_COLUMNS = ("step", "lr", "recon", "freq", "total", "psnr_val")


def cosine_lr(step: int, total: int, lr_max: float = 5e-4, lr_min: float = 1e-7) -> float:
    if total <= 0:
        raise ConfigError(f"total steps must be positive, got {total}")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))


def _contiguous(a: np.ndarray) -> np.ndarray:
    # unlike np.ascontiguousarray this keeps 0-d arrays 0-d
    return a if a.flags.c_contiguous else a.copy()


class Adam:
    """Bias-corrected Adam over an ordered list of named parameters."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.step_count = 0

    def step(self, lr: float) -> None:
        # Validate every gradient before touching any parameter.
        for name, p in self.params:
            if p.grad is not None and not kernels.all_finite(p.grad.reshape(-1)):
                bad = int(np.count_nonzero(~np.isfinite(p.grad)))
                raise NonFiniteError(f"non-finite gradient in parameter '{name}' ({bad} entries)")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            # the kernel writes through flat views, so the targets must be contiguous
            p.data = _contiguous(p.data)
            m = self.m[name] = _contiguous(self.m[name])
            v = self.v[name] = _contiguous(self.v[name])
            kernels.adam_update(p.data.reshape(-1), _contiguous(g).reshape(-1),
                                m.reshape(-1), v.reshape(-1), lr, b1, b2, c1, c2, self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads:
            g *= s
    return norm


# ---------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    config_digest: bytes
    tensors: dict = field(default_factory=dict)  # insertion order is the file order
    version: int = VERSION

    def group(self, prefix: str) -> dict:
        cut = len(prefix)
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def meta(self, key: str) -> np.ndarray:
        try:
            return self.tensors["meta/" + key]
        except KeyError as exc:
            raise FormatError(f"checkpoint lacks meta/{key}") from exc


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_digest) != DIGEST_BYTES:
        raise FormatError(f"config digest must be {DIGEST_BYTES} bytes")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(ckpt.config_digest)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        a = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    def fail(msg):
        raise FormatError(f"{source}: {msg}")

    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            fail(f"truncated at byte {pos} (needed {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        fail("bad magic; not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        fail(f"unsupported checkpoint version {version} (expected {VERSION})")
    digest = take(DIGEST_BYTES)
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            fail("tensor name is not valid utf-8")
        if name in tensors:
            fail(f"duplicate tensor {name!r}")
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            fail(f"{name}: implausible rank {rank}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = arr
    if pos != len(data):
        fail(f"{len(data) - pos} trailing bytes after the last record")
    return Checkpoint(digest, tensors, version)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from exc
    return decode_checkpoint(data, str(path))


def make_checkpoint(model, optim: Adam, step: int, dataset_seed: int,
                    window: Optional[np.ndarray] = None) -> Checkpoint:
    tensors = {}
    for name, p in model.named_parameters():
        tensors["param/" + name] = p.data.copy()
    for name, _ in optim.params:
        tensors["adam.m/" + name] = optim.m[name].copy()
    for name, _ in optim.params:
        tensors["adam.v/" + name] = optim.v[name].copy()
    tensors["meta/step"] = np.array(float(step))
    tensors["meta/adam_step"] = np.array(float(optim.step_count))
    tensors["meta/dataset_seed"] = np.array(float(dataset_seed))
    tensors["meta/window"] = np.zeros(4) if window is None else np.array(window, dtype=np.float64)
    return Checkpoint(model.cfg.digest(), tensors)


def restore(model, optim: Adam, ckpt: Checkpoint) -> dict:
    """Apply a checkpoint after validating all of it; nothing changes on failure."""
    if ckpt.config_digest != model.cfg.digest():
        raise FormatError("checkpoint was written for a different network configuration")
    params = ckpt.group("param/")
    m, v = ckpt.group("adam.m/"), ckpt.group("adam.v/")
    own = dict(model.named_parameters())
    for label, group in (("parameters", params), ("first moments", m), ("second moments", v)):
        if set(group) != set(own):
            missing = sorted(set(own) - set(group))[:3]
            extra = sorted(set(group) - set(own))[:3]
            raise FormatError(f"checkpoint {label} mismatch; missing={missing} unexpected={extra}")
        for name, arr in group.items():
            if arr.shape != own[name].shape:
                raise FormatError(f"{name}: checkpoint shape {arr.shape} != model {own[name].shape}")
    meta = {k: ckpt.meta(k) for k in ("step", "adam_step", "dataset_seed", "window")}
    for name, p in own.items():
        p.data = params[name].copy()
        optim.m[name] = m[name].copy()
        optim.v[name] = v[name].copy()
    optim.step_count = int(meta["adam_step"])
    return {"step": int(meta["step"]), "dataset_seed": int(meta["dataset_seed"]),
            "window": meta["window"].copy()}


# ---------------------------------------------------------------- training loop
@dataclass
class TrainConfig:
    iterations: int = 2000
    batch: int = 4
    crop: int = 64
    lr_max: float = 5e-4
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    lam: float = 0.1
    freq_levels: int = 3
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 500

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be >= 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError("need 0 < lr_min <= lr_max")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigError("Adam needs beta1, beta2 in [0, 1) and eps > 0")


@dataclass
class TrainResult:
    rows: list            # CSV rows (dicts keyed by LOG_COLUMNS)
    step_losses: list     # total loss of every step run in this call
    checkpoint: Optional[Path]
    seconds: float


def sample_batch(hazy: np.ndarray, clear: np.ndarray, seed: int, step: int,
                 batch: int, crop: int) -> tuple:
    rng = np.random.default_rng([int(seed), int(step)])
    idx = rng.integers(0, hazy.shape[0], size=batch)
    seeds = rng.integers(0, 2 ** 63, size=batch)
    pairs = [hazegen.augment((hazy[i], clear[i]), int(s), crop) for i, s in zip(idx, seeds)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def validation_psnr(model, hazy: np.ndarray, clear: np.ndarray, chunk: int = 8) -> float:
    scores = []
    for k in range(0, hazy.shape[0], chunk):
        out = model.dehaze(hazy[k:k + chunk])
        scores += [objectives.psnr(o, c) for o, c in zip(out, clear[k:k + chunk])]
    return float(np.mean(scores))


def format_row(row: dict) -> str:
    return ",".join("" if row[c] is None else repr(row[c]) for c in LOG_COLUMNS)


def train(model, hazy: np.ndarray, clear: np.ndarray, cfg: TrainConfig,
          val: Optional[tuple] = None, out_dir=None, resume=None, dataset_seed: int = 0,
          stop_after: Optional[int] = None,
          on_row: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Optimize ``model`` on (N, C, H, W) pairs for ``cfg.iterations`` steps.

    ``resume`` is a checkpoint path to continue from. ``stop_after`` ends the
    call after that many global steps (the schedule still spans
    ``cfg.iterations``), which is how interrupted runs are simulated. A
    checkpoint is kept in ``out_dir`` and only replaced by a good state.
    """
    cfg.validate()
    hazy = np.asarray(hazy, dtype=np.float64)
    clear = np.asarray(clear, dtype=np.float64)
    if hazy.shape != clear.shape or hazy.ndim != 4 or hazy.shape[0] < 1:
        raise ConfigError(f"need matching non-empty (N, C, H, W) pairs, got {hazy.shape}")
    model.check_size(cfg.crop, cfg.crop)
    optim = Adam(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    start = 0
    window = np.zeros(4)  # running sums of recon, freq, total and the step count
    if resume is not None:
        state = restore(model, optim, load_checkpoint(resume))
        start, window = state["step"], state["window"]
        if state["dataset_seed"] != dataset_seed:
            raise ConfigError(
                f"checkpoint dataset seed {state['dataset_seed']} != requested {dataset_seed}"
            )
    ckpt_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        ckpt_path = Path(out_dir) / "checkpoint.lpmb"
    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    rows, losses = [], []
    t0 = time.perf_counter()
    params = model.parameters()
    for step in range(start, end):
        lr = cosine_lr(step, cfg.iterations, cfg.lr_max, cfg.lr_min)
        xb, yb = sample_batch(hazy, clear, cfg.seed, step, cfg.batch, cfg.crop)
        model.zero_grad()
        rep = objectives.total_loss(model(Tensor(xb)), Tensor(yb), cfg.lam, cfg.freq_levels)
        vals = rep.values()
        if not all(math.isfinite(x) for x in vals.values()):
            where = f"; last good checkpoint: {ckpt_path}" if ckpt_path and ckpt_path.exists() else ""
            raise NonFiniteError(f"non-finite loss at step {step} ({vals}){where}")
        rep.total.backward()
        clip_grad_norm(params, cfg.clip_norm)
        optim.step(lr)
        losses.append(vals["total"])
        window += (vals["recon"], vals["freq"], vals["total"], 1.0)
        done = step + 1
        if step == 0 or done % cfg.log_every == 0 or done == cfg.iterations:
            cnt = window[3]
            row = {"step": done, "lr": float(lr), "recon": float(window[0] / cnt),
                   "freq": float(window[1] / cnt), "total": float(window[2] / cnt),
                   "psnr_val": validation_psnr(model, *val) if val is not None else None}
            window = np.zeros(4)
            rows.append(row)
            if on_row is not None:
                on_row(row)
        if ckpt_path is not None and (done % cfg.checkpoint_every == 0 or done == end):
            save_checkpoint(ckpt_path, make_checkpoint(model, optim, done, dataset_seed, window))
    return TrainResult(rows, losses, ckpt_path, time.perf_counter() - t0)


def write_log(path, rows: list, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a") as fh:
        if new:
            fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(format_row(row) + "\n")


def evaluate(model, hazy: np.ndarray, clear: np.ndarray) -> dict:
    with no_grad():
        out = model.dehaze(hazy)
    return {
        "psnr": float(np.mean([objectives.psnr(o, c) for o, c in zip(out, clear)])),
        "ssim": float(np.mean([objectives.ssim(o, c) for o, c in zip(out, clear)])),
        "psnr_input": float(np.mean([objectives.psnr(h, c) for h, c in zip(hazy, clear)])),
    }
