"""Synthetic paired dehazing data, augmentation, and band-variance analysis.

Clear scenes are procedural (gradient backdrop, soft-edged shapes, faint
texture). Haze follows the scattering model ``I = J t + A (1 - t)`` with
transmission ``t = exp(-beta d)`` over a smooth synthetic depth field.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import imageio, lftm
from .errors import ConfigError, FormatError
from .tensor import Tensor

BETA_RANGE = (0.6, 2.5)
AIRLIGHT_RANGE = (0.7, 1.0)
CLEAR_RANGE = (0.02, 0.98)


@dataclass
class HazeParams:
    beta: float
    A: float
    depth: np.ndarray
    seed: int = 0

    def validate(self, strict: bool = True) -> None:
        lo_b, hi_b = BETA_RANGE if strict else (0.0, np.inf)
        lo_a, hi_a = AIRLIGHT_RANGE if strict else (0.0, 1.0)
        if not lo_b <= self.beta <= hi_b:
            raise ConfigError(f"beta={self.beta} outside [{lo_b}, {hi_b}]")
        if not lo_a <= self.A <= hi_a:
            raise ConfigError(f"A={self.A} outside [{lo_a}, {hi_a}]")
        d = np.asarray(self.depth)
        if d.ndim != 2:
            raise ConfigError(f"depth must be a 2D map, got shape {d.shape}")
        if strict and (d.min() < 0.0 or d.max() > 1.0):
            raise ConfigError("depth values must lie in [0, 1]")
        if not strict and d.min() < 0.0:
            raise ConfigError("depth must be non-negative")


def transmission(p: HazeParams) -> np.ndarray:
    return np.exp(-p.beta * np.asarray(p.depth, dtype=np.float64))


def synthesize_haze(clear: np.ndarray, p: HazeParams, strict: bool = True) -> np.ndarray:
    """Apply the scattering model to a (C, H, W) image in [0, 1].

    ``strict=False`` admits parameters outside the sampling ranges (e.g. beta=0
    or very deep scenes), which is useful for checking the model's limits.
    """
    j = np.asarray(clear, dtype=np.float64)
    p.validate(strict)
    if j.ndim != 3 or j.shape[1:] != np.shape(p.depth):
        raise ConfigError(f"depth {np.shape(p.depth)} does not match image {j.shape}")
    if j.min() < 0.0 or j.max() > 1.0:
        raise ConfigError("clear image must lie in [0, 1]")
    t = transmission(p)[None]
    return j * t + p.A * (1.0 - t)


def _normalize(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = x.max() - x.min()
    if span == 0:
        return np.full_like(x, 0.5 * (lo + hi))
    return lo + (hi - lo) * (x - x.min()) / span


def generate_clear(seed: int, size) -> np.ndarray:
    """Deterministic piecewise-smooth RGB scene of shape (3, H, W) in [0.02, 0.98]."""
    h, w = (size, size) if np.isscalar(size) else (int(size[0]), int(size[1]))
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = _normalize(np.cos(theta) * xx + np.sin(theta) * yy, 0.0, 1.0)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0, 1, 3)[:, None, None]
        cy, cx = rng.uniform(0, 1, 2)
        edge = 1.5 / max(h, w)  # about one and a half pixels of soft edge
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.3)
            sd = np.hypot(yy - cy, xx - cx) - r
        else:
            hy, hx = rng.uniform(0.06, 0.3, 2)
            sd = np.maximum(np.abs(yy - cy) - hy, np.abs(xx - cx) - hx)
        alpha = np.clip(0.5 - sd / edge, 0.0, 1.0)[None]
        img = img * (1 - alpha) + color * alpha
    texture = gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, 1.0, 1.0))
    img = img + 0.04 * texture
    return _normalize(img, *CLEAR_RANGE)


def generate_depth(seed: int, size) -> np.ndarray:
    """Smooth depth map in [0, 1]: far at the top, with low-frequency undulation."""
    h, w = (size, size) if np.isscalar(size) else (int(size[0]), int(size[1]))
    rng = np.random.default_rng(seed)
    rows = np.linspace(1.0, 0.0, h)[:, None] * np.ones((1, w))
    blob = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 6.0, mode="reflect")
    blob = _normalize(blob, 0.0, 1.0)
    mix = rng.uniform(0.3, 0.7)
    return np.clip(_normalize(mix * rows + (1 - mix) * blob, 0.0, 1.0), 0.0, 1.0)


def sample_params(seed: int, size) -> HazeParams:
    rng = np.random.default_rng(seed)
    beta = float(rng.uniform(*BETA_RANGE))
    a = float(rng.uniform(*AIRLIGHT_RANGE))
    return HazeParams(beta, a, generate_depth(seed, size), seed)


# ---------------------------------------------------------------- augmentation
@dataclass(frozen=True)
class Transform:
    rot: int      # quarter turns, counter-clockwise
    flip_h: bool
    flip_v: bool
    top: int
    left: int
    crop: int


def rot90(img: np.ndarray, k: int) -> np.ndarray:
    return np.rot90(img, k, axes=(-2, -1))


def flip_h(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1]


def flip_v(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1, :]


def sample_transform(seed, shape, crop: int) -> Transform:
    h, w = shape[-2:]
    if crop < 1 or crop > min(h, w):
        raise ConfigError(f"crop {crop} does not fit image {h}x{w}")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, 4))
    fh, fv = bool(rng.integers(0, 2)), bool(rng.integers(0, 2))
    # rotation by an odd number of quarter turns swaps the axes
    hh, ww = (w, h) if k % 2 else (h, w)
    top = int(rng.integers(0, hh - crop + 1))
    left = int(rng.integers(0, ww - crop + 1))
    return Transform(k, fh, fv, top, left, crop)


def apply_transform(img: np.ndarray, t: Transform) -> np.ndarray:
    out = rot90(img, t.rot)
    if t.flip_h:
        out = flip_h(out)
    if t.flip_v:
        out = flip_v(out)
    out = out[..., t.top:t.top + t.crop, t.left:t.left + t.crop]
    return np.ascontiguousarray(out)


def augment(pair, seed, crop: int = 64) -> tuple:
    """Apply one random rotation/flip/crop, identical for both images of the pair."""
    hazy, clear = (np.asarray(a) for a in pair)
    if hazy.shape != clear.shape:
        raise ConfigError(f"pair shapes differ: {hazy.shape} vs {clear.shape}")
    t = sample_transform(seed, hazy.shape, crop)
    return apply_transform(hazy, t), apply_transform(clear, t)


# ---------------------------------------------------------------- variance analysis
@dataclass
class VarianceReport:
    rows: list  # (var_low, var_high) per image

    def to_csv(self) -> str:
        lines = ["index,var_low,var_high"]
        lines += [f"{i},{lo:.10g},{hi:.10g}" for i, (lo, hi) in enumerate(self.rows)]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        arr = np.asarray(self.rows, dtype=np.float64).reshape(-1, 2)
        head = f"{'band':<6}{'mean':>14}{'median':>14}{'min':>14}{'max':>14}"
        out = [f"images: {len(self.rows)}", head]
        for k, name in enumerate(("low", "high")):
            col = arr[:, k]
            out.append(f"{name:<6}{col.mean():>14.6g}{np.median(col):>14.6g}"
                       f"{col.min():>14.6g}{col.max():>14.6g}")
        return "\n".join(out) + "\n"


def band_variance(img: np.ndarray, levels: int = 1) -> tuple:
    """Per-channel population variance of the low band and of the high bands, channel-averaged."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    highs, low = lftm.lft_multi(Tensor(x[None]), levels)
    var_low = float(low.data[0].reshape(x.shape[0], -1).var(axis=1).mean())
    var_high = float(np.mean([h.data[0].reshape(x.shape[0], -1).var(axis=1).mean()
                              for h in highs]))
    return var_low, var_high


def variance_analysis(corpus, levels: int = 1) -> VarianceReport:
    images = list(corpus)
    if not images:
        raise ConfigError("variance analysis needs at least one image")
    return VarianceReport([band_variance(im, levels) for im in images])


# ---------------------------------------------------------------- datasets
@dataclass
class PairRecord:
    index: int
    scene_seed: int
    params: HazeParams
    clear: np.ndarray
    hazy: np.ndarray


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def make_pair(seed: int, index: int, size) -> PairRecord:
    s = pair_seed(seed, index)
    clear = generate_clear(s, size)
    params = sample_params(s + 1, clear.shape[1:])
    return PairRecord(index, s, params, clear, synthesize_haze(clear, params))


def make_pairs(count: int, size, seed: int) -> list:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    return [make_pair(seed, i, size) for i in range(count)]


MANIFEST = "manifest.txt"


def write_dataset(root, count: int, size, seed: int, force: bool = False) -> Path:
    """Write ``clear/NNNN.png``, ``hazy/NNNN.png`` and a manifest under ``root``."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise ConfigError(f"{root} exists and is not empty (use --force to overwrite)")
    (root / "clear").mkdir(parents=True, exist_ok=True)
    (root / "hazy").mkdir(parents=True, exist_ok=True)
    lines = [f"# seed={seed} count={count} size={size}", "index scene_seed beta A"]
    for rec in make_pairs(count, size, seed):
        name = f"{rec.index:04d}.png"
        imageio.write_image(root / "clear" / name, rec.clear)
        imageio.write_image(root / "hazy" / name, rec.hazy)
        lines.append(f"{rec.index:04d} {rec.scene_seed} {rec.params.beta!r} {rec.params.A!r}")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return root


def read_manifest(root) -> list:
    rows = []
    for line in (Path(root) / MANIFEST).read_text().splitlines():
        parts = line.split()
        if not parts or line.startswith("#") or parts[0] == "index":
            continue
        if len(parts) != 4:
            raise FormatError(f"malformed manifest line: {line!r}")
        rows.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
    return rows


def load_dataset(root) -> tuple:
    """Read a generated dataset as two (N, 3, H, W) arrays ``(hazy, clear)``."""
    root = Path(root)
    for sub in ("clear", "hazy"):
        if not (root / sub).is_dir():
            raise ConfigError(f"{root} has no '{sub}' directory")
    names = [p.name for p in imageio.list_images(root / "clear")]
    if not names:
        raise ConfigError(f"{root / 'clear'} contains no images")
    missing = [n for n in names if not (root / "hazy" / n).exists()]
    if missing:
        raise ConfigError(f"hazy images missing for {missing[:3]}")
    clear = np.stack([imageio.read_image(root / "clear" / n) for n in names])
    hazy = np.stack([imageio.read_image(root / "hazy" / n) for n in names])
    if clear.shape != hazy.shape:
        raise ConfigError("clear and hazy images differ in size")
    return hazy, clear
