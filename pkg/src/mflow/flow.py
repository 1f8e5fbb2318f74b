"""Loss mathematics: interpolation, RF loss, CFG velocities, and the
MeanFlow distillation target/loss.

The distillation target follows the average-velocity identity
u = v + (s - t) du/dt, with du/dt computed as a JVP of the student along the
tangent (v_inst, 1, 0) over (z, t, s) and the whole target frozen behind a
stop-gradient. The instantaneous velocity v_inst comes from one of four
formulations: ground-truth (z1 - z0), the self-referential original-MeanFlow
CFG, or teacher CFG against the null / negative condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import FieldNet, student_forward, teacher_forward
from .tensor import Tensor

CFG_MODES = ("gt", "original_mf", "teacher_null", "teacher_neg")


@dataclass
class CfgConfig:
    """Guidance formulation for the instantaneous velocity."""
    mode: str = "teacher_neg"
    w: float = 6.0
    kappa: float = 0.0  # original_mf only

    def __post_init__(self):
        if self.mode not in CFG_MODES:
            raise ValueError(f"unknown cfg mode {self.mode!r}; expected one of {CFG_MODES}")
        if self.w < 0:
            raise ValueError("guidance scale w must be >= 0")
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError("kappa must lie in [0, 1)")

    @property
    def effective_scale(self) -> float:
        return self.w / (1.0 - self.kappa)


@dataclass(frozen=True)
class TimestepPair:
    t: float
    s: float

    def __post_init__(self):
        if not 0.0 <= self.t <= self.s <= 1.0:
            raise ValueError(f"need 0 <= t <= s <= 1, got t={self.t}, s={self.s}")


@dataclass
class LossConfig:
    metric: str = "pseudo_huber"  # squared_l2 | pseudo_huber
    huber_c: float | None = None  # None -> 0.03 * sqrt(dim)
    ratio_r: float = 0.5          # fraction of pairs with t != s

    def __post_init__(self):
        if self.metric not in ("squared_l2", "pseudo_huber"):
            raise ValueError(f"unknown loss metric {self.metric!r}")
        if self.huber_c is not None and self.huber_c <= 0:
            raise ValueError("huber_c must be positive")
        if not 0.0 <= self.ratio_r <= 1.0:
            raise ValueError("ratio_r must lie in [0, 1]")

    def resolve_huber_c(self, dim: int) -> float:
        return self.huber_c if self.huber_c is not None else 0.03 * np.sqrt(dim)


def interpolate(z0, z1, t):
    """Linear bridge (1 - t) z0 + t z1; t may be scalar or per-sample."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ValueError(f"endpoint shapes differ: {z0.shape} vs {z1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and z0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * z0 + t * z1


def sample_timesteps(rng: np.random.Generator, ratio_r: float) -> TimestepPair:
    """Draw t ~ U[0,1]; with probability ratio_r also draw s ~ U[t,1], else s = t."""
    t, gate, q = rng.random(3)
    s = t + q * (1.0 - t) if gate < ratio_r else t
    return TimestepPair(t=float(t), s=float(s))

def sample_timestep_batch(rng: np.random.Generator, n: int, ratio_r: float):
    """Vectorized draw of n (t, s) pairs with the same law as sample_timesteps."""
    t = rng.random(n)
    gate = rng.random(n)
    q = rng.random(n)
    s = np.where(gate < ratio_r, t + q * (1.0 - t), t)
    return t, s


def _teacher_eval(teacher, z, t, z_lr, c) -> np.ndarray:
    """Evaluate a teacher (FieldNet or test stub) as a plain array.

    ``c`` is per-sample content ids, or the strings "null"/"negative" for the
    reserved rows; stubs receive it verbatim.
    """
    if isinstance(teacher, FieldNet):
        if isinstance(c, str):
            if c not in ("null", "negative"):
                raise ValueError(f"unknown reserved condition {c!r}")
            c = teacher.null_id if c == "null" else teacher.negative_id
        return teacher_forward(teacher, z, t, z_lr, c).data
    out = teacher(z, t, z_lr, c)
    return out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)


def cfg_velocity(teacher, z, t, z_lr, c, cfg: CfgConfig,
                 student: FieldNet | None = None, z0=None, z1=None) -> np.ndarray:
    """Instantaneous-velocity formulation selected by ``cfg.mode``.

    Returns a plain array: the result always feeds the stop-gradded target,
    so nothing here participates in parameter gradients.
    """
    z = np.asarray(z, dtype=np.float64)
    if cfg.mode == "gt":
        if z0 is None or z1 is None:
            raise ValueError("gt mode requires the endpoint pair (z0, z1)")
        return np.asarray(z1, dtype=np.float64) - np.asarray(z0, dtype=np.float64)
    if cfg.mode == "teacher_null":
        v_c = _teacher_eval(teacher, z, t, z_lr, c)
        v_null = _teacher_eval(teacher, z, t, z_lr, "null")
        return v_c + cfg.w * (v_c - v_null)
    if cfg.mode == "teacher_neg":
        v_c = _teacher_eval(teacher, z, t, z_lr, c)
        v_neg = _teacher_eval(teacher, z, t, z_lr, "negative")
        return v_c + cfg.w * (v_c - v_neg)
    # original_mf: self-referential CFG through the student at s = t
    if student is None or z0 is None or z1 is None:
        raise ValueError("original_mf mode requires the student and the endpoint pair (z0, z1)")
    u_c = student_forward(student, z, t, t, z_lr, c).data
    null_ids = np.full(z.shape[0], student.null_id, dtype=np.int64)
    u_null = student_forward(student, z, t, t, z_lr, null_ids).data
    gt = np.asarray(z1, dtype=np.float64) - np.asarray(z0, dtype=np.float64)
    return cfg.w * gt + cfg.kappa * u_c + (1.0 - cfg.w - cfg.kappa) * u_null


def _student_jvp(student: FieldNet, z, t, s, z_lr, c, v_inst):
    """One dual forward: (u(z,t,s), du/dt) with tangent (v_inst, 1, 0)."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
    s = np.broadcast_to(np.asarray(s, dtype=np.float64).reshape(-1, 1), (n, 1))
    z_in = Tensor(z, tangent=np.asarray(v_inst, dtype=np.float64))
    t_in = Tensor(t, tangent=np.ones((n, 1)))
    s_in = Tensor(s, tangent=np.zeros((n, 1)))
    u = student_forward(student, z_in, t_in, s_in, z_lr, c)
    dudt = u.tangent if u.tangent is not None else np.zeros_like(u.data)
    return u, dudt


def mfd_target(student: FieldNet, v_inst, z, t, s, z_lr, c) -> Tensor:
    """Stop-gradded regression target v_inst + (s - t) du/dt."""
    v_inst = np.asarray(v_inst, dtype=np.float64)
    _, dudt = _student_jvp(student, z, t, s, z_lr, c, v_inst)
    gap = np.asarray(s, dtype=np.float64).reshape(-1, 1) - np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return Tensor(v_inst + gap * dudt)


def pseudo_huber(a, b, huber_c: float) -> float:
    """sqrt(||a - b||^2 + c^2) - c over the full tensors."""
    if huber_c <= 0:
        raise ValueError("huber_c must be positive")
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2) + huber_c ** 2) - huber_c)


def rf_loss(teacher, batch) -> Tensor:
    """Mean over the batch of ||v(z_t, t | lr, c) - (z1 - z0)||^2."""
    z_t = interpolate(batch.z0, batch.z1, batch.t)
    if isinstance(teacher, FieldNet):
        pred = teacher_forward(teacher, z_t, batch.t, batch.z_lr, batch.labels)
    else:
        pred = teacher(z_t, batch.t, batch.z_lr, batch.labels)
        pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    diff = pred - Tensor(batch.z1 - batch.z0)
    return (diff * diff).sum(axis=1).mean()


def mfd_loss(student: FieldNet, teacher, batch, cfg: CfgConfig, loss_cfg: LossConfig) -> Tensor:
    """MeanFlow distillation loss over a batch.

    z0 is noise, z1 the data endpoint, so z_t = t z1 + (1 - t) z0. Gradients
    flow only through the student prediction; the target (and everything the
    teacher computed) is a constant.
    """
    t, s = np.asarray(batch.t, dtype=np.float64), np.asarray(batch.s, dtype=np.float64)
    z_t = interpolate(batch.z0, batch.z1, t)
    v_inst = cfg_velocity(teacher, z_t, t, batch.z_lr, batch.labels, cfg,
                          student=student, z0=batch.z0, z1=batch.z1)
    u_pred, dudt = _student_jvp(student, z_t, t, s, batch.z_lr, batch.labels, v_inst)
    target = v_inst + (s - t)[:, None] * dudt
    diff = u_pred - Tensor(target)
    per_sample = (diff * diff).sum(axis=1)
    if loss_cfg.metric == "squared_l2":
        return per_sample.mean()
    c = loss_cfg.resolve_huber_c(z_t.shape[1])
    return (per_sample + c * c).sqrt().mean() - c
