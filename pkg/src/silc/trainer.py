"""Training loop: combined contrastive + distillation objective.

Per-step contract (fixed for determinism): forward losses (teacher runs on
the pre-update EMA weights) -> backward -> gradient clip -> optimizer step
on student + temperature + projection head -> EMA update of the teacher ->
center update from this batch's teacher logits.

All randomness is derived from the run seed and the step index, so a run
is a pure function of its config: metrics CSVs are bit-identical across
reruns, and a checkpoint resume replays the original step stream exactly.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig, config_hash, parse_config_text, resolve_text
from .contrastive import contrastive_loss, init_contrastive_state
from .data import SyntheticDataset, ViewBatch, make_batch
from .distillation import (
    TeacherState,
    ema_update,
    center_update,
    init_projection_head,
    make_teacher,
    multicrop_distillation,
    projection_forward,
    ProjectionHeadConfig,
)
from .encoders import init_image_params, init_text_params, text_forward, vision_forward
from .rng import Stream, derive

METRIC_COLUMNS = (
    "step",
    "examples_seen",
    "loss_total",
    "loss_contrastive",
    "loss_dist",
    "lr",
    "temperature",
    "grad_norm",
)

NO_DECAY_MARKERS = (".ln", "temp.log_t")


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def lr_schedule(step: int, cfg) -> float:
    """Linear warmup, reciprocal-sqrt decay, linear cooldown to zero.

    warmup:   lr = base * step / warmup_steps
    decay:    lr = base * sqrt(warmup_steps / step)
    cooldown: linear ramp from the decay value at the cooldown boundary to 0
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    base, warm = cfg.base_lr, cfg.warmup_steps
    total, cool = cfg.total_steps, cfg.cooldown_steps

    def decay(s: float) -> float:
        if warm == 0:
            return base
        return base if s <= warm else base * float(np.sqrt(warm / s))

    cool_start = total - cool
    if step <= warm and warm > 0:
        return base * step / warm
    if cool > 0 and step >= cool_start:
        return decay(cool_start) * max(total - step, 0) / cool
    return decay(step)


@dataclass
class AdamW:
    """Decoupled weight decay Adam over a named parameter dict.

    Layer-norm parameters and the temperature are excluded from decay;
    parameters that received no gradient this step are left untouched.
    """

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-4
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def update(self, params: dict[str, Tensor], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and not any(mark in name for mark in NO_DECAY_MARKERS):
                step = step + self.weight_decay * p.data
            p.data = p.data - lr * step


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            g = np.ascontiguousarray(p.grad).ravel()
            total += float(np.dot(g, g))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


@dataclass
class TrainState:
    cfg: RunConfig
    params: dict[str, Tensor]
    optimizer: AdamW
    teacher: TeacherState | None
    step: int = 0

    @property
    def examples_seen(self) -> int:
        return self.step * self.cfg.trainer.batch_size


def init_state(cfg: RunConfig, dtype=np.float32) -> TrainState:
    tc = cfg.trainer
    seed = derive(tc.seed, "init")
    params: dict[str, Tensor] = {}
    params.update(init_image_params(cfg.image, seed, dtype))
    params.update(init_text_params(cfg.text, seed, dtype))
    params.update(
        init_projection_head(
            ProjectionHeadConfig(in_dim=cfg.image.embed_dim, out_dim=tc.proj_dim), seed, dtype
        )
    )
    state = init_contrastive_state(dtype)
    params["temp.log_t"] = state.log_temperature
    teacher = None
    if tc.ema_enabled:
        teacher = make_teacher(params, tc.proj_dim, tc.lam, tc.m_center, tc.tau_t, tc.tau_s)
    opt = AdamW(beta1=tc.beta1, beta2=tc.beta2, weight_decay=tc.weight_decay)
    return TrainState(cfg=cfg, params=params, optimizer=opt, teacher=teacher)


def _diagnose_nonfinite(tape: ad.Tape, fallback: str) -> str:
    name = tape.first_nonfinite()
    return name if name is not None else fallback


def train_step(state: TrainState, batch: ViewBatch) -> dict:
    """One optimization step; returns the metrics record for the CSV."""
    cfg = state.cfg
    tc = cfg.trainer
    p = state.params
    ad.zero_grads(p)
    b = batch.tokens.shape[0]
    n_global = batch.global_views.shape[0]

    with ad.Tape() as tape:
        # contrastive branch: the resized full image, plus each global view
        # against the same caption batch when enabled
        if tc.contrastive_global_views:
            imgs = np.concatenate([batch.contrastive[None], batch.global_views], axis=0)
        else:
            imgs = batch.contrastive[None]
        n_views = imgs.shape[0]
        stacked = imgs.reshape(-1, *imgs.shape[2:])
        img_fwd = vision_forward(p, cfg.image, stacked)
        f_all = ad.l2_normalize(img_fwd.pooled, axis=-1)
        g = ad.l2_normalize(text_forward(p, cfg.text, batch.tokens), axis=-1)
        t = ad.exp(p["temp.log_t"])
        con_terms = []
        for i in range(n_views):
            f_i = ad.slice_(f_all, np.s_[i * b : (i + 1) * b])
            con_terms.append(contrastive_loss(f_i, g, t))
        loss_con = con_terms[0]
        for term in con_terms[1:]:
            loss_con = ad.add(loss_con, term)
        loss_con = ad.scalar_mul(loss_con, 1.0 / n_views)

        # distillation branch: teacher on globals, student on locals
        loss_dist = None
        teacher_logits = None
        if state.teacher is not None:
            teacher = state.teacher
            glob = batch.global_views.reshape(-1, *batch.global_views.shape[2:])
            t_fwd = vision_forward(teacher.params, cfg.image, glob)
            t_proj = projection_forward(teacher.params, t_fwd.pooled)
            teacher_logits = np.asarray(t_proj.data)
            t_views = [teacher_logits[i * b : (i + 1) * b] for i in range(n_global)]
            if tc.w_dist > 0:
                loc = batch.local_views.reshape(-1, *batch.local_views.shape[2:])
                s_fwd = vision_forward(p, cfg.image, loc, view="local")
                s_proj = projection_forward(p, s_fwd.pooled)
                n_local = batch.local_views.shape[0]
                s_views = [ad.slice_(s_proj, np.s_[i * b : (i + 1) * b]) for i in range(n_local)]
                s_globals = []
                if tc.distill_global_global:
                    gl_pool = ad.slice_(img_fwd.pooled, np.s_[b:]) if tc.contrastive_global_views else None
                    if gl_pool is None:
                        g_fwd = vision_forward(p, cfg.image, glob)
                        gl_pool = g_fwd.pooled
                    gl_proj = projection_forward(p, gl_pool)
                    s_globals = [
                        ad.slice_(gl_proj, np.s_[i * b : (i + 1) * b]) for i in range(n_global)
                    ]
                loss_dist = multicrop_distillation(
                    t_views, s_views, teacher, tc.distill_global_global, s_globals
                )
            else:
                # reported but outside the gradient: forward without recording
                with ad.no_grad():
                    loc = batch.local_views.reshape(-1, *batch.local_views.shape[2:])
                    s_fwd = vision_forward(p, cfg.image, loc, view="local")
                    s_proj = projection_forward(p, s_fwd.pooled)
                    n_local = batch.local_views.shape[0]
                    s_views = [
                        Tensor(np.asarray(s_proj.data)[i * b : (i + 1) * b])
                        for i in range(n_local)
                    ]
                    loss_dist = multicrop_distillation(t_views, s_views, teacher, False, [])

        if loss_dist is not None and tc.w_dist > 0:
            total = ad.add(loss_con, ad.scalar_mul(loss_dist, tc.w_dist))
        else:
            total = loss_con

        if not np.isfinite(total.data):
            raise NonFiniteLossError(
                f"non-finite loss at step {state.step}; first offending op: "
                f"{_diagnose_nonfinite(tape, 'loss')}"
            )
        tape.backward(total)

    grad_norm = clip_global_norm(p, tc.grad_clip)
    lr = lr_schedule(state.step, tc)
    state.optimizer.update(p, lr)

    if state.teacher is not None:
        ema_update(state.teacher.params, p, tc.lam)
        state.teacher.center = center_update(state.teacher.center, teacher_logits, tc.m_center)

    state.step += 1
    return {
        "step": state.step,
        "examples_seen": state.examples_seen,
        "loss_total": float(total.data),
        "loss_contrastive": float(loss_con.data),
        "loss_dist": float(loss_dist.data) if loss_dist is not None else 0.0,
        "lr": lr,
        "temperature": float(np.exp(p["temp.log_t"].data)),
        "grad_norm": grad_norm,
    }


def batch_for_step(ds: SyntheticDataset, cfg: RunConfig, step: int) -> ViewBatch:
    """Deterministic batch for one step: indices and crop seeds from the run seed."""
    tc = cfg.trainer
    order = Stream(derive(tc.seed, "order", step))
    indices = order.randint(tc.batch_size, ds.size("train"))
    return make_batch(ds, cfg.crops, "train", indices, derive(tc.seed, "views", step))


def format_metrics_row(rec: dict) -> str:
    cells = []
    for col in METRIC_COLUMNS:
        v = rec[col]
        cells.append(str(v) if isinstance(v, int) else format(float(v), ".8g"))
    return ",".join(cells)


def run_training(
    cfg: RunConfig,
    run_dir,
    dataset: SyntheticDataset | None = None,
    resume_from=None,
    max_steps: int | None = None,
    log_every: int = 1,
) -> TrainState:
    """Train to completion, streaming metrics and writing checkpoints."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(resolve_text(cfg))
    ds = dataset if dataset is not None else SyntheticDataset(cfg.data)
    if resume_from is not None:
        state = load_checkpoint(resume_from, expected=cfg)
        mode = "a"
    else:
        state = init_state(cfg)
        mode = "w"
    total = cfg.trainer.total_steps if max_steps is None else min(max_steps, cfg.trainer.total_steps)
    interval = cfg.trainer.checkpoint_interval
    with open(run_dir / "metrics.csv", mode) as fh:
        if mode == "w":
            fh.write(",".join(METRIC_COLUMNS) + "\n")
        while state.step < total:
            batch = batch_for_step(ds, cfg, state.step)
            rec = train_step(state, batch)
            if rec["step"] % log_every == 0 or rec["step"] == total:
                fh.write(format_metrics_row(rec) + "\n")
            if interval > 0 and state.step % interval == 0 and state.step < total:
                save_checkpoint(state, run_dir / f"ckpt_{state.step:06d}.bin")
    save_checkpoint(state, run_dir / "final.bin")
    return state


# ---------------------------------------------------------------------------
# checkpoint serialization (layout documented in docs/formats.md)
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SILCCKP1"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb
    head += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def _unpack_array(buf: memoryview, off: int) -> tuple[str, np.ndarray, int]:
    (nlen,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = bytes(buf[off : off + nlen]).decode()
    off += nlen
    code, ndim = struct.unpack_from("<BB", buf, off)
    off += 2
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape).copy()
    off += count * dtype.itemsize
    return name, arr, off


def _pack_section(items: dict[str, np.ndarray]) -> bytes:
    out = struct.pack("<I", len(items))
    for name in sorted(items):
        out += _pack_array(name, items[name])
    return out


def _unpack_section(buf: memoryview, off: int) -> tuple[dict[str, np.ndarray], int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    items = {}
    for _ in range(n):
        name, arr, off = _unpack_array(buf, off)
        items[name] = arr
    return items, off


def save_checkpoint(state: TrainState, path) -> None:
    cfg_text = resolve_text(state.cfg).encode()
    payload = struct.pack("<I", CKPT_VERSION)
    payload += struct.pack("<I", len(cfg_text)) + cfg_text
    payload += struct.pack("<QQQ", state.step, state.cfg.trainer.seed, state.optimizer.t)
    payload += _pack_section({k: t.data for k, t in state.params.items()})
    if state.teacher is not None:
        payload += struct.pack("<B", 1)
        payload += _pack_section({k: t.data for k, t in state.teacher.params.items()})
        payload += _pack_array("center", state.teacher.center)
    else:
        payload += struct.pack("<B", 0)
    payload += _pack_section(state.optimizer.m)
    payload += _pack_section(state.optimizer.v)
    digest = hashlib.sha256(payload).digest()
    Path(path).write_bytes(CKPT_MAGIC + payload + digest)


def load_checkpoint(path, expected: RunConfig | None = None) -> TrainState:
    raw = Path(path).read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 36 or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    payload, digest = raw[len(CKPT_MAGIC) : -32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"checksum mismatch in {path}: file is corrupt")
    buf = memoryview(payload)
    (version,) = struct.unpack_from("<I", buf, 0)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 4
    (clen,) = struct.unpack_from("<I", buf, off)
    off += 4
    cfg_text = bytes(buf[off : off + clen]).decode()
    off += clen
    cfg = parse_config_text(cfg_text)
    if expected is not None and resolve_text(expected) != cfg_text:
        theirs = dict(l.split(" = ") for l in cfg_text.strip().splitlines())
        ours = dict(l.split(" = ") for l in resolve_text(expected).strip().splitlines())
        diff = [k for k in sorted(set(theirs) | set(ours)) if theirs.get(k) != ours.get(k)]
        raise ConfigMismatchError(
            f"checkpoint config does not match the requested config; differing keys: {diff}"
        )
    step, seed, opt_t = struct.unpack_from("<QQQ", buf, off)
    off += 24
    arrays, off = _unpack_section(buf, off)
    (has_teacher,) = struct.unpack_from("<B", buf, off)
    off += 1
    teacher = None
    if has_teacher:
        t_arrays, off = _unpack_section(buf, off)
        cname, center, off = _unpack_array(buf, off)
        tc = cfg.trainer
        teacher = TeacherState(
            params={k: Tensor(v, requires_grad=False) for k, v in t_arrays.items()},
            center=center,
            lam=tc.lam,
            m=tc.m_center,
            tau_t=tc.tau_t,
            tau_s=tc.tau_s,
        )
    m_sec, off = _unpack_section(buf, off)
    v_sec, off = _unpack_section(buf, off)

    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    opt = AdamW(
        beta1=cfg.trainer.beta1,
        beta2=cfg.trainer.beta2,
        weight_decay=cfg.trainer.weight_decay,
        m=m_sec,
        v=v_sec,
        t=opt_t,
    )
    return TrainState(cfg=cfg, params=params, optimizer=opt, teacher=teacher, step=step)


def params_fingerprint(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()
