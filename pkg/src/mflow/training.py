"""Optimization, checkpointing, and the teacher / distillation training loops."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (DegradeParams, Gen2dDataset, GaussianDataset, ToySrDataset,
                   build_sr_pool, make_batch)
from .flow import CfgConfig, LossConfig, mfd_loss, rf_loss
from .nets import FieldNet, init_student_from_teacher
from .tensor import Tensor


class NumericalAbort(RuntimeError):
    """Raised when a loss or gradient goes non-finite; last checkpoint is kept."""


# -- Adam ----------------------------------------------------------------------

class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        # reusable per-parameter work buffers; the update is memory-bound, so
        # avoiding a fresh allocation per pass roughly halves its cost
        self._buf_a: dict[str, np.ndarray] = {}
        self._buf_b: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        """One update; returns fresh parameter tensors."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalAbort(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros(p.shape)
            m = self.m.setdefault(name, np.zeros(p.shape))
            v = self.v.setdefault(name, np.zeros(p.shape))
            a = self._buf_a.setdefault(name, np.empty(p.shape))
            b = self._buf_b.setdefault(name, np.empty(p.shape))
            # m <- beta1*m + (1-beta1)*g; v <- beta2*v + (1-beta2)*g*g
            np.multiply(m, self.beta1, out=m)
            np.multiply(g, 1.0 - self.beta1, out=a)
            np.add(m, a, out=m)
            np.multiply(v, self.beta2, out=v)
            np.multiply(g, 1.0 - self.beta2, out=a)
            np.multiply(a, g, out=a)
            np.add(v, a, out=v)
            # p - lr*(m/bc1) / (sqrt(v/bc2) + eps), staged through the buffers
            np.divide(m, bc1, out=a)
            np.multiply(a, self.lr, out=a)
            np.divide(v, bc2, out=b)
            np.sqrt(b, out=b)
            np.add(b, self.eps, out=b)
            np.divide(a, b, out=a)
            out[name] = Tensor(p.data - a, requires_grad=True)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, m in self.m.items():
            arrays[f"adam.m.{name}"] = m
            arrays[f"adam.v.{name}"] = self.v[name]
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        for key, arr in arrays.items():
            if key.startswith("adam.m."):
                self.m[key[len("adam.m."):]] = arr.copy()
            elif key.startswith("adam.v."):
                self.v[key[len("adam.v."):]] = arr.copy()


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, bool]:
    """Global-norm clip in place; returns (pre-clip norm, was clipped)."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
        return total, True
    return total, False


# -- checkpoint container --------------------------------------------------------

MAGIC = b"MFLW"
VERSION = 1
_DTYPE_F64 = 0


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Binary container: magic, version, JSON metadata, named f64 tensors."""
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<BB", _DTYPE_F64, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            dtype, rank = struct.unpack("<BB", fh.read(2))
            if dtype != _DTYPE_F64:
                raise ValueError(f"{path}: unknown dtype code {dtype}")
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            tensors[name] = arr.astype(np.float64)
    return tensors, meta


def params_digest(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# -- run configuration -------------------------------------------------------------

@dataclass
class RunConfig:
    """Full experiment description; serialized next to every artifact."""
    task: str = "gen2d"          # gen2d | gaussian | toysr
    dist: str = "two_moons"      # gen2d distribution name
    seed: int = 0
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    lr_final: float = 0.0        # <= 0 disables cosine decay
    paper_lr: float = 5e-5       # reference value from the source setting
    hidden: list = field(default_factory=lambda: [64, 64])
    time_dim: int = 32
    cond_dim: int = 16
    teacher_c_noise: float = 1.0
    grad_clip: float = 10.0
    log_every: int = 100
    ckpt_every: int = 0          # 0 = final checkpoint only
    teacher_ckpt: str = ""
    cfg: CfgConfig = field(default_factory=CfgConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    # gaussian task
    gauss_mu: list = field(default_factory=lambda: [1.0, -0.5])
    gauss_sigma: float = 1.0
    # toy-SR task
    hr_size: int = 32
    num_content: int = 3
    blur_sigma: float = 1.0
    sr_scale: int = 4
    noise_sigma: float = 0.02
    quant_levels: int = 0
    neg_pair_prob: float = 0.1
    train_pool: int = 0          # > 0: pregenerate this many SR pairs for training

    def __post_init__(self):
        if self.task not in ("gen2d", "gaussian", "toysr"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if isinstance(self.cfg, dict):
            self.cfg = CfgConfig(**self.cfg)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        known = set(RunConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dataset(self):
        if self.task == "gen2d":
            return Gen2dDataset(name=self.dist)
        if self.task == "gaussian":
            return GaussianDataset(dim=len(self.gauss_mu),
                                   mu=np.asarray(self.gauss_mu, dtype=np.float64),
                                   sigma=self.gauss_sigma)
        return ToySrDataset(hr_size=self.hr_size, num_content=self.num_content,
                            params=DegradeParams(blur_sigma=self.blur_sigma,
                                                 scale=self.sr_scale,
                                                 noise_sigma=self.noise_sigma,
                                                 quant_levels=self.quant_levels))

    def build_teacher(self) -> FieldNet:
        ds = self.dataset()
        return FieldNet("teacher", ds.z_dim, ds.lr_dim, ds.num_content,
                        cond_dim=self.cond_dim, time_dim=self.time_dim,
                        hidden=tuple(self.hidden), c_noise=self.teacher_c_noise,
                        seed=self.seed)


def _sr_train_pool(config: RunConfig, dataset) -> list | None:
    """Pregenerated SR training pairs, seeded apart from held-out pools."""
    if config.task != "toysr" or config.train_pool <= 0:
        return None
    return build_sr_pool(dataset, config.train_pool, config.seed + 100003)


def _lr_at(config: RunConfig, step: int) -> float:
    """Cosine decay from lr to lr_final; constant when lr_final <= 0."""
    if config.lr_final <= 0:
        return config.lr
    frac = step / max(config.steps - 1, 1)
    return config.lr_final + (config.lr - config.lr_final) * 0.5 * (1.0 + np.cos(np.pi * frac))


def _rng_state_meta(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def _backward_and_collect(loss: Tensor, net: FieldNet) -> dict[str, np.ndarray]:
    params = net.parameters()
    for p in params.values():
        p.grad = None
    loss.backward()
    return {name: (p.grad if p.grad is not None else np.zeros(p.shape))
            for name, p in params.items()}


class _TrainLog:
    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(["step", "loss", "grad_norm", "wall_ms"])

    def row(self, step: int, loss: float, grad_norm: float, wall_ms: float) -> None:
        self.writer.writerow([step, f"{loss:.10g}", f"{grad_norm:.10g}", f"{wall_ms:.3f}"])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _save_net_checkpoint(path, net: FieldNet, adam: Adam, config: RunConfig,
                         step: int, rng: np.random.Generator, role: str) -> None:
    tensors = {name: p.data for name, p in net.parameters().items()}
    tensors.update(adam.state_arrays())
    meta = {"role": role, "step": step, "config_digest": config.digest(),
            "net_config": net.config(), "config": config.to_dict(),
            "adam_step": adam.step_count, "rng_state": _rng_state_meta(rng)}
    save_checkpoint(path, tensors, meta)


def _load_net(path) -> tuple[FieldNet, dict[str, np.ndarray], dict]:
    tensors, meta = load_checkpoint(path)
    net = FieldNet.from_config(meta["net_config"])
    for name in net.parameters():
        net.set_parameter(name, Tensor(tensors[name].copy(), requires_grad=True))
    if net.kind == "student":
        net.s_embedder.freqs = net.t_embedder.freqs.copy()
    return net, tensors, meta


def train_teacher(config: RunConfig, out_dir, resume: str | None = None) -> Path:
    """Rectified-flow teacher training; returns the final checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = config.dataset()
    adam = Adam(lr=config.lr)
    start = 0
    if resume:
        teacher, tensors, meta = _load_net(resume)
        adam.load_state_arrays(tensors, meta["adam_step"])
        rng = _restore_rng(meta["rng_state"])
        start = meta["step"]
    else:
        teacher = config.build_teacher()
        rng = np.random.default_rng(config.seed)
    final = out / "teacher.ckpt"
    log = _TrainLog(out / "teacher_log.csv")
    neg_prob = config.neg_pair_prob if config.task == "toysr" else 0.0
    pool = _sr_train_pool(config, dataset)
    try:
        for step in range(start, config.steps):
            t0 = time.perf_counter()
            adam.lr = _lr_at(config, step)
            batch = make_batch(dataset, config.batch_size, rng,
                               ratio_r=0.0, neg_pair_prob=neg_prob, pool=pool)
            loss = rf_loss(teacher, batch)
            if not np.isfinite(loss.item()):
                raise NumericalAbort(f"non-finite teacher loss at step {step}")
            grads = _backward_and_collect(loss, teacher)
            norm, _ = clip_gradients(grads, config.grad_clip)
            for name, p in adam.step(teacher.parameters(), grads).items():
                teacher.set_parameter(name, p)
            if step % config.log_every == 0 or step == config.steps - 1:
                log.row(step, loss.item(), norm, (time.perf_counter() - t0) * 1e3)
            if config.ckpt_every and (step + 1) % config.ckpt_every == 0:
                _save_net_checkpoint(out / f"teacher_step{step + 1}.ckpt", teacher,
                                     adam, config, step + 1, rng, "teacher")
        _save_net_checkpoint(final, teacher, adam, config, config.steps, rng, "teacher")
    finally:
        log.close()
    return final


def load_teacher(path) -> FieldNet:
    net, _, _ = _load_net(path)
    if net.kind != "teacher":
        raise ValueError(f"{path} does not hold a teacher checkpoint")
    return net


def load_student(path) -> FieldNet:
    net, _, _ = _load_net(path)
    if net.kind != "student":
        raise ValueError(f"{path} does not hold a student checkpoint")
    return net


def distill_student(config: RunConfig, teacher_ckpt, out_dir) -> Path:
    """MeanFlow distillation of a frozen teacher into an average-velocity student."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    teacher = load_teacher(teacher_ckpt)
    ds = config.dataset()
    if (teacher.z_dim, teacher.lr_dim, teacher.num_content) != (ds.z_dim, ds.lr_dim, ds.num_content):
        raise ValueError("teacher checkpoint does not match the configured dataset")
    frozen_digest = params_digest(teacher.parameters())
    student = init_student_from_teacher(teacher)
    adam = Adam(lr=config.lr)
    rng = np.random.default_rng(config.seed)
    log = _TrainLog(out / "student_log.csv")
    final = out / "student.ckpt"
    pool = _sr_train_pool(config, ds)
    try:
        for step in range(config.steps):
            t0 = time.perf_counter()
            adam.lr = _lr_at(config, step)
            batch = make_batch(ds, config.batch_size, rng, ratio_r=config.loss.ratio_r,
                               pool=pool)
            loss = mfd_loss(student, teacher, batch, config.cfg, config.loss)
            if not np.isfinite(loss.item()):
                raise NumericalAbort(f"non-finite distillation loss at step {step}")
            grads = _backward_and_collect(loss, student)
            norm, _ = clip_gradients(grads, config.grad_clip)
            for name, p in adam.step(student.parameters(), grads).items():
                student.set_parameter(name, p)
            if step % config.log_every == 0 or step == config.steps - 1:
                log.row(step, loss.item(), norm, (time.perf_counter() - t0) * 1e3)
            if config.ckpt_every and (step + 1) % config.ckpt_every == 0:
                _save_net_checkpoint(out / f"student_step{step + 1}.ckpt", student,
                                     adam, config, step + 1, rng, "student")
        _save_net_checkpoint(final, student, adam, config, config.steps, rng, "student")
    finally:
        log.close()
    if params_digest(teacher.parameters()) != frozen_digest:
        raise RuntimeError("teacher parameters changed during distillation")
    return final
