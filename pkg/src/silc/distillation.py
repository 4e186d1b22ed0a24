"""Local-to-global self-distillation from an EMA teacher.

The teacher is an exponential moving average of the student's image tower
and projection head (theta_T <- lambda theta_T + (1 - lambda) theta_S).
Teacher logits are centered by a running mean c and sharpened at tau_t;
the student matches them with a cross-entropy at tau_s.  Centering and the
EMA are the only writes to teacher state, and no gradient ever flows
through the teacher (its tensors never require grad; its probabilities
enter the loss as constants).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import Stream, derive

TEACHER_PREFIXES = ("img.", "proj.")


@dataclass(frozen=True)
class ProjectionHeadConfig:
    """MLP from the shared embedding space (J) to distillation logits (K)."""

    in_dim: int = 32
    out_dim: int = 256  # full-scale reference value: 65536

    def __post_init__(self):
        if not self.out_dim > self.in_dim:
            raise ValueError(
                f"projection head must expand: out_dim {self.out_dim} <= in_dim {self.in_dim}"
            )

    @property
    def hidden(self) -> int:
        return 4 * self.in_dim


def init_projection_head(cfg: ProjectionHeadConfig, seed: int, dtype=np.float32) -> dict:
    """Fan-in scaled truncated-normal init.

    At this head's tiny fan-in a flat std of 0.02 contracts activations by
    ~10x per layer, which collapses the sharpened teacher distribution to
    numerically-uniform and kills the distillation gradient; scaling by
    1/sqrt(fan_in) keeps the logit spread alive.
    """
    stream = Stream(derive(seed, "projection_head"))
    j, h, k = cfg.in_dim, cfg.hidden, cfg.out_dim

    def tn(shape):
        std = 1.0 / np.sqrt(shape[0])
        return Tensor(
            stream.trunc_normal(int(np.prod(shape)), std).reshape(shape).astype(dtype),
            requires_grad=True,
        )

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return {
        "proj.w1": tn((j, h)),
        "proj.b1": zeros((h,)),
        "proj.w2": tn((h, h)),
        "proj.b2": zeros((h,)),
        "proj.w3": tn((h, k)),
        "proj.b3": zeros((k,)),
    }


def projection_forward(p: dict, x: Tensor) -> Tensor:
    """(B, J) shared-space embeddings -> (B, K) distillation logits.

    The input is unit-normalized first: the shared embedding space the
    two towers meet in is the l2-normalized one, and normalizing keeps the
    head's input scale independent of the encoder's output magnitude.
    """
    h = ad.gelu(ad.linear(ad.l2_normalize(x, axis=-1), p["proj.w1"], p["proj.b1"]))
    h = ad.gelu(ad.linear(h, p["proj.w2"], p["proj.b2"]))
    return ad.linear(h, p["proj.w3"], p["proj.b3"])


@dataclass
class TeacherState:
    """EMA parameters plus the centering vector and distillation scalars."""

    params: dict[str, Tensor]
    center: np.ndarray
    lam: float = 0.966
    m: float = 0.9
    tau_t: float = 0.04
    tau_s: float = 0.1

    def param_hash(self) -> int:
        acc = 0
        for name in sorted(self.params):
            acc ^= hash((name, self.params[name].data.tobytes()))
        return acc ^ hash(self.center.tobytes())


def make_teacher(
    student: dict, k: int, lam: float = 0.966, m: float = 0.9, tau_t: float = 0.04, tau_s: float = 0.1
) -> TeacherState:
    """Teacher initialized as an exact copy of the student's image side; c = 0."""
    params = {
        name: Tensor(t.data.copy(), requires_grad=False)
        for name, t in student.items()
        if name.startswith(TEACHER_PREFIXES)
    }
    return TeacherState(
        params=params,
        center=np.zeros(k, dtype=np.float32),
        lam=lam,
        m=m,
        tau_t=tau_t,
        tau_s=tau_s,
    )


def ema_update(teacher: dict, student: dict, lam: float) -> dict:
    """theta_T <- lam * theta_T + (1 - lam) * theta_S, elementwise."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"EMA factor must lie in [0, 1], got {lam}")
    t_keys = set(teacher)
    s_keys = {k for k in student if k.startswith(TEACHER_PREFIXES)}
    if t_keys != s_keys:
        raise ValueError(
            f"teacher/student structure mismatch: only-teacher={sorted(t_keys - s_keys)} "
            f"only-student={sorted(s_keys - t_keys)}"
        )
    for name, t in teacher.items():
        s = student[name]
        if t.data.shape != s.data.shape:
            raise ValueError(
                f"shape mismatch for {name}: teacher {t.data.shape} vs student {s.data.shape}"
            )
        t.data = lam * t.data + (1.0 - lam) * s.data
    return teacher


def center_update(c: np.ndarray, teacher_batch: np.ndarray, m: float) -> np.ndarray:
    """c <- m c + (1 - m) * mean_i p_i^t over the batch of teacher logits."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"center momentum must lie in [0, 1], got {m}")
    teacher_batch = np.atleast_2d(np.asarray(teacher_batch))
    if teacher_batch.shape[0] == 0:
        raise ValueError("center_update on an empty batch")
    return m * np.asarray(c) + (1.0 - m) * teacher_batch.mean(axis=0)


def teacher_probs(p_t: np.ndarray, c: np.ndarray, tau_t: float) -> np.ndarray:
    """softmax((p_t - c) / tau_t); pure numpy, no gradient to the teacher."""
    if tau_t <= 0:
        raise ValueError(f"teacher temperature must be > 0, got {tau_t}")
    z = (np.asarray(p_t) - np.asarray(c)) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _student_log_probs(p_s: Tensor, tau_s: float) -> Tensor:
    if tau_s <= 0:
        raise ValueError(f"student temperature must be > 0, got {tau_s}")
    return ad.log_softmax(ad.scalar_mul(p_s, 1.0 / tau_s), axis=-1)


def _cross_entropy(p_t: np.ndarray, log_p_s: Tensor) -> Tensor:
    # mean over the batch of -sum_k P_t log P_s; P_t enters as a constant
    b = 1 if log_p_s.ndim == 1 else log_p_s.shape[0]
    return ad.scalar_mul(ad.sum_(ad.mul(Tensor(p_t), log_p_s)), -1.0 / b)


def self_distillation_loss(p_t_probs: np.ndarray, p_s: Tensor, tau_s: float) -> Tensor:
    """Cross-entropy of the student's sharpened softmax against teacher probs.

    ``p_t_probs`` must already be a point on the simplex (see teacher_probs);
    vector (K,) and batched (B, K) inputs are both accepted.
    """
    p_t_probs = np.asarray(p_t_probs)
    if np.any(p_t_probs < 0):
        raise ValueError("teacher probabilities contain negative entries")
    if not isinstance(p_s, Tensor):
        p_s = Tensor(p_s)
    return _cross_entropy(p_t_probs, _student_log_probs(p_s, tau_s))


def multicrop_distillation(
    teacher_out,
    student_out,
    state: TeacherState,
    include_global_global: bool = False,
    student_global_out=(),
) -> Tensor:
    """Average pairwise distillation loss over (teacher global, student local).

    ``teacher_out``: raw teacher logits per global view (numpy (B, K) each).
    ``student_out``: student logits per local view (tensors (B, K) each).
    With the flag on, (teacher global g, student global g' != g) cross terms
    over ``student_global_out`` are added (two extra terms for two globals).
    """
    probs = [teacher_probs(t, state.center, state.tau_t) for t in teacher_out]
    log_ps = [_student_log_probs(s, state.tau_s) for s in student_out]
    terms = [_cross_entropy(pt, lp) for pt in probs for lp in log_ps]
    if include_global_global:
        log_gl = [_student_log_probs(s, state.tau_s) for s in student_global_out]
        for gi, pt in enumerate(probs):
            for gj, lp in enumerate(log_gl):
                if gi != gj:
                    terms.append(_cross_entropy(pt, lp))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scalar_mul(total, 1.0 / len(terms))
