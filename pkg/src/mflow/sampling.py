"""Inference for teacher and student, plus desk-scale evaluation metrics."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import GaussianDataset, Gen2dDataset, SrPair, ToySrDataset, from_signal, gen_2d, to_signal
from .flow import CfgConfig
from .nets import FieldNet, student_forward, teacher_forward
from .oracle import AnalyticFlow


def _eval_student(student, z, t: float, s: float, z_lr, c) -> np.ndarray:
    if isinstance(student, FieldNet):
        return student_forward(student, z, t, s, z_lr, c).data
    return np.asarray(student(z, t, s, z_lr, c), dtype=np.float64)


def sample_student(student, z0: np.ndarray, z_lr, c, n_steps: int,
                   grid=None, record: bool = False):
    """N applications of z <- z + (tau_{n+1} - tau_n) u(z, tau_n, tau_{n+1}).

    ``student`` is a FieldNet or a callable u(z, t, s, z_lr, c); ``grid``
    overrides the default uniform time points 0 = tau_1 < ... < tau_{N+1} = 1.
    """
    if n_steps < 1:
        raise ValueError("need at least one sampling step")
    taus = np.linspace(0.0, 1.0, n_steps + 1) if grid is None else np.asarray(grid, dtype=np.float64)
    if taus[0] != 0.0 or taus[-1] != 1.0 or np.any(np.diff(taus) <= 0):
        raise ValueError("time grid must be strictly increasing from 0 to 1")
    z = np.asarray(z0, dtype=np.float64).copy()
    states = [z.copy()] if record else None
    for t, s in zip(taus[:-1], taus[1:]):
        z = z + (s - t) * _eval_student(student, z, float(t), float(s), z_lr, c)
        if record:
            states.append(z.copy())
    return (z, states) if record else z


def _eval_teacher(teacher, z, t: float, z_lr, c) -> np.ndarray:
    if isinstance(teacher, FieldNet):
        if isinstance(c, str):
            c = teacher.null_id if c == "null" else teacher.negative_id
        return teacher_forward(teacher, z, t, z_lr, c).data
    return np.asarray(teacher(z, t, z_lr, c), dtype=np.float64)


def sample_teacher_euler(teacher, z0: np.ndarray, z_lr, c, n_steps: int,
                         cfg: CfgConfig | None = None) -> np.ndarray:
    """Euler integration x <- x + (1/N) v(x, t), optionally with teacher CFG."""
    if n_steps < 1:
        raise ValueError("need at least one Euler step")
    if cfg is not None and cfg.mode not in ("teacher_null", "teacher_neg"):
        raise ValueError("inference-time guidance supports only the teacher CFG modes")
    z = np.asarray(z0, dtype=np.float64).copy()
    h = 1.0 / n_steps
    for i in range(n_steps):
        t = i * h
        v = _eval_teacher(teacher, z, t, z_lr, c)
        if cfg is not None and cfg.w != 0.0:
            ref = "null" if cfg.mode == "teacher_null" else "negative"
            v = v + cfg.w * (v - _eval_teacher(teacher, z, t, z_lr, ref))
        z = z + h * v
    return z


# -- metrics ------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1/MSE) for [0,1] images; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def moment_distance(samples: np.ndarray, flow: AnalyticFlow) -> tuple[float, float]:
    """(‖mean - mu‖, ‖cov - sigma^2 I‖_F) of an empirical sample set."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ValueError("need at least two samples of shape (n, dim)")
    mean_err = float(np.linalg.norm(samples.mean(axis=0) - flow.mu))
    cov = np.cov(samples, rowvar=False).reshape(flow.dim, flow.dim)
    cov_err = float(np.linalg.norm(cov - flow.sigma ** 2 * np.eye(flow.dim)))
    return mean_err, cov_err


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Energy distance between two point clouds (2 E‖X-Y‖ - E‖X-X'‖ - E‖Y-Y'‖)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def mean_dist(a, b):
        d = np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0))
        return float(d.mean())

    return 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


def hf_band_energy(img: np.ndarray, cutoff_frac: float = 0.25) -> float:
    """Mean spectral power above a radial frequency cutoff (fraction of Nyquist)."""
    img = np.asarray(img, dtype=np.float64)
    f = np.fft.fft2(img - img.mean())
    power = np.abs(f) ** 2 / img.size
    fy = np.fft.fftfreq(img.shape[0])
    fx = np.fft.fftfreq(img.shape[1])
    rr = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    mask = rr > cutoff_frac * 0.5
    return float(power[mask].mean())


def block_upsample(lr: np.ndarray, scale: int) -> np.ndarray:
    """Nearest/block upsample; the no-learning SR baseline."""
    return np.repeat(np.repeat(lr, scale, axis=0), scale, axis=1)


def sr_infer(student, pair: SrPair, dataset: ToySrDataset, n_steps: int,
             rng: np.random.Generator) -> np.ndarray:
    """One SR restoration: sample from noise conditioned on the LR image."""
    z0 = rng.standard_normal((1, dataset.z_dim))
    z_lr = to_signal(pair.lr).ravel()[None, :]
    z = sample_student(student, z0, z_lr, pair.label, n_steps)
    return from_signal(z.reshape(dataset.hr_size, dataset.hr_size))


# -- sweep report ----------------------------------------------------------------

def steps_sweep(student, dataset, n_list, seed: int, n_samples: int,
                flow: AnalyticFlow | None = None, pool: list[SrPair] | None = None,
                out_path=None) -> list[dict]:
    """Evaluate the student at several step counts; one CSV row per metric.

    Metric depends on the dataset: moment errors for the Gaussian task,
    energy distance for 2-D point clouds, PSNR over an SR pool. Values are
    reported, never ranked.
    """
    rows = []
    for n in n_list:
        rng = np.random.default_rng(seed)
        if isinstance(dataset, GaussianDataset):
            if flow is None:
                flow = AnalyticFlow(dim=dataset.dim, mu=dataset.mu, sigma=dataset.sigma)
            z0 = rng.standard_normal((n_samples, dataset.dim))
            z_lr = np.zeros((n_samples, 0))
            out = sample_student(student, z0, z_lr, 0, n)
            mean_err, cov_err = moment_distance(out, flow)
            rows.append({"N": n, "metric_name": "mean_err", "value": mean_err,
                         "n_samples": n_samples, "seed": seed})
            rows.append({"N": n, "metric_name": "cov_err", "value": cov_err,
                         "n_samples": n_samples, "seed": seed})
        elif isinstance(dataset, Gen2dDataset):
            z0 = rng.standard_normal((n_samples, 2))
            z_lr = np.zeros((n_samples, 0))
            out = sample_student(student, z0, z_lr, 0, n)
            ref = gen_2d(dataset.name, n_samples, rng)
            rows.append({"N": n, "metric_name": "energy_distance",
                         "value": energy_distance(out, ref),
                         "n_samples": n_samples, "seed": seed})
        else:
            if pool is None:
                raise ValueError("SR sweeps need a held-out pair pool")
            pairs = pool[:n_samples]
            vals = [psnr(sr_infer(student, p, dataset, n, rng), p.hr) for p in pairs]
            rows.append({"N": n, "metric_name": "psnr_mean",
                         "value": float(np.mean(vals)),
                         "n_samples": len(pairs), "seed": seed})
    if out_path is not None:
        write_sweep_csv(out_path, rows)
    return rows


def write_sweep_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "metric_name", "value", "n_samples", "seed"])
        for r in rows:
            value = r["value"]
            text = "inf" if np.isinf(value) else f"{value:.10g}"
            writer.writerow([r["N"], r["metric_name"], text, r["n_samples"], r["seed"]])
