"""Desk-scale datasets: 2-D point clouds and a miniature super-resolution task.

HR images are procedural grayscale patterns whose class label stands in for
a text prompt; LR counterparts come from a small blur/downsample/noise
pipeline. Training tensors live in [-1, 1] (images are mapped from [0, 1]);
the reserved negative label is given meaning during teacher training by
occasionally pairing it with extra-degraded targets.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .flow import sample_timestep_batch

GEN2D_NAMES = ("checkerboard", "two_moons", "ring")


@dataclass
class DegradeParams:
    blur_sigma: float = 1.0
    scale: int = 4
    noise_sigma: float = 0.02
    quant_levels: int = 0  # 0 or 1 = off

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0 or self.quant_levels < 0:
            raise ValueError("degradation parameters must be non-negative")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")


@dataclass
class SrPair:
    hr: np.ndarray
    lr: np.ndarray
    label: int
    seed: int


@dataclass
class FlowBatch:
    """One training bundle: noise, data, LR condition, labels, timestep pair."""
    z0: np.ndarray      # (B, D) noise endpoint
    z1: np.ndarray      # (B, D) data endpoint
    z_lr: np.ndarray    # (B, D_lr) flattened LR features (width 0 when unused)
    labels: np.ndarray  # (B,) condition ids
    t: np.ndarray       # (B,)
    s: np.ndarray       # (B,)

    def __len__(self) -> int:
        return self.z0.shape[0]


def gen_2d(dist_name: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. samples from a named 2-D toy distribution, shape (n, 2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if dist_name == "ring":
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        radius = 1.0 + rng.uniform(-0.05, 0.05, n)
        return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    if dist_name == "checkerboard":
        # even-parity cells of a 4x4 grid over [-2, 2]^2
        cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
        picks = rng.integers(0, len(cells), n)
        offs = rng.uniform(0.0, 1.0, (n, 2))
        out = np.empty((n, 2))
        for k, p in enumerate(picks):
            i, j = cells[p]
            out[k] = (-2.0 + i + offs[k, 0], -2.0 + j + offs[k, 1])
        return out
    if dist_name == "two_moons":
        half = rng.random(n) < 0.5
        theta = rng.uniform(0.0, np.pi, n)
        x = np.where(half, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(half, np.sin(theta), 0.5 - np.sin(theta))
        noise = rng.normal(0.0, 0.05, (n, 2))
        return np.stack([x, y], axis=1) + noise
    raise ValueError(f"unknown 2-D distribution {dist_name!r}; valid: {GEN2D_NAMES}")


def checkerboard_cell_parity(points: np.ndarray) -> np.ndarray:
    """Parity of the grid cell each point falls in (0 = allowed cells)."""
    ij = np.floor(points + 2.0).astype(int)
    return (ij[:, 0] + ij[:, 1]) % 2


def gen_pattern(class_id: int, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural grayscale HR pattern in [0, 1] for a content class.

    0 = oriented stripes, 1 = checker texture, 2 = radial gradient with dots;
    frequency and phase are randomized by ``rng``.
    """
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    if class_id == 0:
        freq = rng.uniform(1.0, 3.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = np.sin(2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        return 0.5 + 0.45 * wave
    if class_id == 1:
        fx = rng.integers(1, 4)
        fy = rng.integers(1, 4)
        px, py = rng.uniform(0.0, 2.0 * np.pi, 2)
        return 0.5 + 0.45 * np.sin(2.0 * np.pi * fx * xx + px) * np.sin(2.0 * np.pi * fy * yy + py)
    if class_id == 2:
        cx, cy = rng.uniform(0.3, 0.7, 2)
        r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        img = 1.0 - np.clip(r / 0.8, 0.0, 1.0)
        for _ in range(int(rng.integers(2, 5))):
            dx, dy = rng.uniform(0.1, 0.9, 2)
            sig = rng.uniform(0.06, 0.12)
            amp = rng.uniform(-0.35, 0.35)
            img = img + amp * np.exp(-((xx - dx) ** 2 + (yy - dy) ** 2) / (2.0 * sig ** 2))
        return np.clip(img, 0.0, 1.0)
    raise ValueError(f"pattern classes are content labels 0..2, got {class_id} "
                     "(null/negative label conditioning, not content)")


def degrade(hr: np.ndarray, params: DegradeParams, rng: np.random.Generator) -> np.ndarray:
    """Blur -> block-mean downsample -> optional quantize -> noise, clamped."""
    hr = np.asarray(hr, dtype=np.float64)
    h, w = hr.shape
    k = params.scale
    if h % k != 0 or w % k != 0:
        raise ValueError(f"scale {k} does not divide image dims {hr.shape}")
    x = gaussian_filter(hr, params.blur_sigma, mode="reflect") if params.blur_sigma > 0 else hr
    x = x.reshape(h // k, k, w // k, k).mean(axis=(1, 3))
    if params.quant_levels >= 2:
        levels = params.quant_levels - 1
        x = np.round(x * levels) / levels
    if params.noise_sigma > 0:
        x = x + rng.normal(0.0, params.noise_sigma, x.shape)
    return np.clip(x, 0.0, 1.0)


def extra_degrade(hr: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mildly blurred, contrast-flattened HR; the negative label's target.

    Deliberately gentle: guidance extrapolates along (v_cond - v_negative)
    scaled by w, so the negative direction must stay small for large w to
    sharpen rather than overshoot.
    """
    x = gaussian_filter(np.asarray(hr, dtype=np.float64), 0.4, mode="reflect")
    return np.clip(0.97 * x + 0.03 * x.mean(), 0.0, 1.0)


def to_signal(img: np.ndarray) -> np.ndarray:
    """[0, 1] image to [-1, 1] flow-space values."""
    return 2.0 * img - 1.0


def from_signal(z: np.ndarray) -> np.ndarray:
    return np.clip((z + 1.0) / 2.0, 0.0, 1.0)


# -- dataset configs ---------------------------------------------------------

@dataclass
class Gen2dDataset:
    name: str = "two_moons"
    z_dim: int = 2
    lr_dim: int = 0
    num_content: int = 1

    def __post_init__(self):
        if self.name not in GEN2D_NAMES:
            raise ValueError(f"unknown 2-D distribution {self.name!r}; valid: {GEN2D_NAMES}")


@dataclass
class GaussianDataset:
    """Analytic Gaussian target N(mu, sigma^2 I); pairs with the exact oracle."""
    dim: int = 2
    mu: np.ndarray = field(default_factory=lambda: np.array([1.0, -0.5]))
    sigma: float = 1.0
    lr_dim: int = 0
    num_content: int = 1

    @property
    def z_dim(self) -> int:
        return self.dim


@dataclass
class ToySrDataset:
    hr_size: int = 32
    num_content: int = 3
    params: DegradeParams = field(default_factory=DegradeParams)

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.params.scale

    @property
    def z_dim(self) -> int:
        return self.hr_size * self.hr_size

    @property
    def lr_dim(self) -> int:
        return self.lr_size * self.lr_size

    @property
    def negative_id(self) -> int:
        return self.num_content + 1

    def make_pair(self, class_id: int, seed: int) -> SrPair:
        rng = np.random.default_rng(seed)
        hr = gen_pattern(class_id, self.hr_size, self.hr_size, rng)
        lr = degrade(hr, self.params, rng)
        return SrPair(hr=hr, lr=lr, label=class_id, seed=seed)


def build_sr_pool(dataset: ToySrDataset, n: int, base_seed: int) -> list[SrPair]:
    """Deterministic pool of SR pairs; per-pair seed = base ^ index."""
    rng = np.random.default_rng(base_seed)
    classes = rng.integers(0, dataset.num_content, n)
    return [dataset.make_pair(int(c), base_seed ^ (i + 1)) for i, c in enumerate(classes)]


def make_batch(dataset, batch_size: int, rng: np.random.Generator,
               ratio_r: float = 0.5, neg_pair_prob: float = 0.0,
               pool: list[SrPair] | None = None) -> FlowBatch:
    """Bundle (noise, data, LR, labels, timestep pair) for one training step."""
    if isinstance(dataset, Gen2dDataset):
        z1 = gen_2d(dataset.name, batch_size, rng)
        z_lr = np.zeros((batch_size, 0))
        labels = np.zeros(batch_size, dtype=np.int64)
    elif isinstance(dataset, GaussianDataset):
        z1 = dataset.mu + dataset.sigma * rng.standard_normal((batch_size, dataset.dim))
        z_lr = np.zeros((batch_size, 0))
        labels = np.zeros(batch_size, dtype=np.int64)
    else:
        hrs, lrs, labels = [], [], []
        for _ in range(batch_size):
            if pool is not None:
                pair = pool[int(rng.integers(0, len(pool)))]
                hr, lr, label = pair.hr, pair.lr, pair.label
            else:
                label = int(rng.integers(0, dataset.num_content))
                hr = gen_pattern(label, dataset.hr_size, dataset.hr_size, rng)
                lr = degrade(hr, dataset.params, rng)
            if neg_pair_prob > 0 and rng.random() < neg_pair_prob:
                hr = extra_degrade(hr, rng)
                label = dataset.negative_id
            hrs.append(to_signal(hr).ravel())
            lrs.append(to_signal(lr).ravel())
            labels.append(label)
        z1 = np.stack(hrs)
        z_lr = np.stack(lrs)
        labels = np.asarray(labels, dtype=np.int64)
    z0 = rng.standard_normal(z1.shape)
    t, s = sample_timestep_batch(rng, batch_size, ratio_r)
    return FlowBatch(z0=z0, z1=z1, z_lr=z_lr, labels=labels, t=t, s=s)


# -- simple I/O ----------------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a [0, 1] grayscale image."""
    img = np.asarray(img, dtype=np.float64)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM file: {path}")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / maxval


def write_manifest(path, pairs: list[SrPair], params: DegradeParams) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "seed", "class", "blur_sigma", "scale", "noise_sigma", "quant_levels"])
        for i, p in enumerate(pairs):
            writer.writerow([i, p.seed, p.label, params.blur_sigma, params.scale,
                             params.noise_sigma, params.quant_levels])
