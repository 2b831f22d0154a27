"""Self-distillation pretraining: multi-crop views, the student/teacher
cross-entropy objective, teacher EMA and center tracking.

For one utterance with ``N`` global and ``M`` local views the loss is::

    1 / (N (N + M - 1)) * sum_{i < N} sum_{j < N + M, j != i} H(p_i, q_j)

where ``p_i = softmax((t_i - c) / tau_t)`` comes from the teacher on global
view ``i`` (held constant) and ``q_j = softmax(s_j / tau_s)`` from the student
on view ``j``. Batches average this over utterances.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import encoder as enc
from .corpus import atomic_write_bytes, load_utterance, read_manifest
from .errors import ConfigError, InvalidInputError
from .numerics import Rng, log_softmax, softmax
from .optim import SGD, warmup_lr

log = logging.getLogger(__name__)


@dataclass
class Augmentation:
    noise_std: float = 0.5
    gain_range: Tuple[float, float] = (0.8, 1.2)
    frame_dropout_prob: float = 0.05

    def __post_init__(self):
        self.gain_range = (float(self.gain_range[0]), float(self.gain_range[1]))
        if self.noise_std < 0 or not 0 <= self.frame_dropout_prob < 1:
            raise ConfigError("augmentation: noise_std >= 0 and dropout in [0, 1) required")
        if self.gain_range[0] > self.gain_range[1]:
            raise ConfigError("augmentation.gain_range must be (low, high)")

    @property
    def disabled(self):
        return self.noise_std == 0 and self.gain_range == (1.0, 1.0) and self.frame_dropout_prob == 0


@dataclass
class DinoConfig:
    n_global: int = 2
    n_local: int = 4
    global_len: int = 30
    local_len: int = 20
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    ema_momentum: float = 0.99
    # optional linear ramp of the EMA momentum to this value by the last step
    ema_momentum_end: Optional[float] = None
    center_momentum: float = 0.9
    learning_rate: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_steps: int = 0
    batch_size: int = 16
    epochs: int = 5
    augmentation: Augmentation = field(default_factory=Augmentation)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = Augmentation(**self.augmentation)
        if self.n_global < 2:
            raise ConfigError("dino.n_global must be >= 2")
        if self.n_local < 0:
            raise ConfigError("dino.n_local must be >= 0")
        if not 2 <= self.local_len < self.global_len:
            raise ConfigError("dino requires 2 <= local_len < global_len")
        if not 0 < self.teacher_temp < self.student_temp:
            raise ConfigError("dino requires 0 < teacher_temp < student_temp")
        for lam in (self.ema_momentum, self.ema_momentum_end):
            if lam is not None and not 0 < lam <= 1:
                raise ConfigError("dino EMA momentum must lie in (0, 1]")
        if not 0 <= self.center_momentum < 1:
            raise ConfigError("dino.center_momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError("dino: batch_size >= 1, epochs >= 0, learning_rate >= 0")


@dataclass
class DinoState:
    student: enc.Params
    teacher: enc.Params
    center: np.ndarray
    step: int = 0


def augment(view, aug, rng):
    if aug.disabled:
        return view
    out = view * rng.uniform(*aug.gain_range)
    if aug.noise_std > 0:
        out = out + aug.noise_std * rng.gaussian(out.shape)
    if aug.frame_dropout_prob > 0:
        keep = rng.uniform(size=out.shape[0]) >= aug.frame_dropout_prob
        out = out * keep[:, None]
    return out


def sample_views(seq, cfg, rng, segment=None):
    """Draw ``n_global`` long and ``n_local`` short augmented crops.

    Crops come from ``segment`` (``(start, end)``, default the whole
    sequence). Returns ``(globals, locals)`` as ``(N, Lg, D)`` and
    ``(M, Ll, D)`` arrays, or ``None`` when the span is shorter than
    ``global_len``.
    """
    seq = np.asarray(seq, dtype=np.float64)
    start, end = segment if segment is not None else (0, seq.shape[0])
    span = end - start
    if span < cfg.global_len:
        return None
    d = seq.shape[1]
    globs = np.empty((cfg.n_global, cfg.global_len, d))
    locs = np.empty((cfg.n_local, cfg.local_len, d))
    for out, n, length in ((globs, cfg.n_global, cfg.global_len), (locs, cfg.n_local, cfg.local_len)):
        for k in range(n):
            off = start + int(rng.integers(0, span - length + 1))
            out[k] = augment(seq[off:off + length], cfg.augmentation, rng)
    return globs, locs


def dino_pairs(n_global, n_local):
    """(teacher view i, student view j) index pairs entering the loss."""
    return [(i, j) for i in range(n_global) for j in range(n_global + n_local) if j != i]


def dino_loss(student_logits, teacher_logits, center, student_temp, teacher_temp):
    """Loss and student-logit gradient for a batch of utterances.

    ``student_logits`` is ``(B, N + M, K)`` (or ``(N + M, K)``), globals first;
    ``teacher_logits`` is ``(B, N, K)``. The loss is the batch mean.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    single = s.ndim == 2
    if single:
        s, t = s[None], t[None]
    if s.ndim != 3 or t.ndim != 3 or s.shape[0] != t.shape[0] or s.shape[2] != t.shape[2]:
        raise InvalidInputError(f"shape mismatch: student {s.shape}, teacher {t.shape}")
    b, v, k = s.shape
    n = t.shape[1]
    if n < 2 or v < n:
        raise InvalidInputError("need N >= 2 teacher views and at least N student views")
    c = np.asarray(center, dtype=np.float64)
    if c.shape != (k,):
        raise InvalidInputError(f"center has shape {c.shape}, expected ({k},)")
    pairs = dino_pairs(n, v - n)
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    pref = 1.0 / len(pairs)

    p = softmax(t - c, teacher_temp)
    logq = log_softmax(s, student_temp)
    terms = -np.sum(p[:, ii] * logq[:, jj], axis=2)  # (B, pairs)
    loss = float(terms.sum(axis=1).mean() * pref)

    q = np.exp(logq)
    grad = np.zeros_like(s)
    np.add.at(grad, (slice(None), jj), q[:, jj] - p[:, ii])
    grad *= pref / (student_temp * b)
    return loss, (grad[0] if single else grad)


def ema_update(teacher, student, momentum):
    if teacher.keys() != student.keys():
        raise InvalidInputError("teacher and student parameter sets differ")
    out = {}
    for name, tp in teacher.items():
        sp = student[name]
        if tp.shape != sp.shape:
            raise InvalidInputError(f"{name}: teacher {tp.shape} vs student {sp.shape}")
        out[name] = momentum * tp + (1.0 - momentum) * sp
    return out


def center_update(center, teacher_logits, momentum):
    t = np.asarray(teacher_logits, dtype=np.float64)
    t = t.reshape(-1, t.shape[-1]) if t.ndim > 1 else t[None]
    if t.shape[0] == 0:
        raise InvalidInputError("empty teacher batch")
    return momentum * np.asarray(center, dtype=np.float64) + (1.0 - momentum) * t.mean(axis=0)


def batch_objective(student, teacher, center, globs, locs, cfg):
    """Loss, student gradients and teacher logits on a batch of views.

    ``globs`` is ``(B, N, Lg, D)``, ``locs`` is ``(B, M, Ll, D)``.
    """
    b, n = globs.shape[:2]
    m = locs.shape[1]
    flat_g = globs.reshape(b * n, *globs.shape[2:])
    s_glob, tr_g = enc.forward(student, flat_g)
    parts = [s_glob.reshape(b, n, -1)]
    tr_l = None
    if m:
        s_loc, tr_l = enc.forward(student, locs.reshape(b * m, *locs.shape[2:]))
        parts.append(s_loc.reshape(b, m, -1))
    # teacher: forward only, never differentiated
    t_logits, _ = enc.forward(teacher, flat_g)
    t_logits = t_logits.reshape(b, n, -1)
    loss, d_s = dino_loss(np.concatenate(parts, axis=1), t_logits, center,
                          cfg.student_temp, cfg.teacher_temp)
    grads = enc.backward(student, tr_g, d_logits=d_s[:, :n].reshape(b * n, -1))
    if m:
        g_loc = enc.backward(student, tr_l, d_logits=d_s[:, n:].reshape(b * m, -1))
        grads = {k: grads[k] + g_loc[k] for k in grads}
    return loss, grads, t_logits


def usable_items(manifest, min_len):
    """(record index, segment) pairs long enough for a global view."""
    items, skipped = [], 0
    for ri, rec in enumerate(manifest):
        for seg in rec.vad_segments:
            if seg[1] - seg[0] >= min_len:
                items.append((ri, seg))
            else:
                skipped += 1
    return items, skipped


def ema_schedule(cfg, step, total_steps):
    if cfg.ema_momentum_end is None or total_steps <= 1:
        return cfg.ema_momentum
    frac = min(1.0, step / (total_steps - 1))
    return cfg.ema_momentum + frac * (cfg.ema_momentum_end - cfg.ema_momentum)


@dataclass
class PretrainResult:
    state: DinoState
    log: List[dict]
    skipped: int
    used: int


def pretrain(manifest_path, enc_cfg, cfg, on_step=None, features=None):
    """Run self-distillation over every usable VAD segment of a manifest.

    ``on_step(state_before, state_after, info)`` is called after each step.
    ``features`` may map utterance ids to preloaded arrays.
    """
    manifest = read_manifest(manifest_path)
    items, skipped = usable_items(manifest, cfg.global_len)
    if not items:
        raise ConfigError(f"no usable segments (>= {cfg.global_len} frames) in {manifest_path}")
    if skipped:
        log.info("skipping %d segments shorter than %d frames", skipped, cfg.global_len)
    feats = dict(features or {})
    for ri, _ in items:
        rec = manifest[ri]
        if rec.utterance_id not in feats:
            feats[rec.utterance_id] = load_utterance(
                manifest_path, rec, enc_cfg.feature_dim).astype(np.float64)

    rng = Rng(cfg.seed)
    init_rng, order_rng, view_rng = rng.spawn(3)
    student = enc.init_params(enc_cfg, init_rng)
    state = DinoState(student=student, teacher=dict(student),
                      center=np.zeros(enc_cfg.head_output_dim))
    opt = SGD(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = (len(items) + cfg.batch_size - 1) // cfg.batch_size
    total = steps_per_epoch * cfg.epochs
    records = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(items))
        for bstart in range(0, len(items), cfg.batch_size):
            batch = [items[i] for i in perm[bstart:bstart + cfg.batch_size]]
            views = [sample_views(feats[manifest[ri].utterance_id], cfg, view_rng, seg)
                     for ri, seg in batch]
            globs = np.stack([v[0] for v in views])
            locs = np.stack([v[1] for v in views])
            loss, grads, t_logits = batch_objective(
                state.student, state.teacher, state.center, globs, locs, cfg)
            lam = ema_schedule(cfg, state.step, total)
            student = opt.step(state.student, grads,
                               warmup_lr(cfg.learning_rate, state.step, cfg.warmup_steps))
            new = DinoState(
                student=student,
                teacher=ema_update(state.teacher, student, lam),
                center=center_update(state.center, t_logits, cfg.center_momentum),
                step=state.step + 1,
            )
            info = {"step": new.step, "epoch": epoch, "loss": loss,
                    "center_norm": float(np.linalg.norm(new.center)), "ema_lambda": lam}
            records.append(info)
            if on_step is not None:
                on_step(state, new, info)
            state = new
    return PretrainResult(state=state, log=records, skipped=skipped, used=len(items))


def loss_log_bytes(records):
    keys = ("step", "epoch", "loss", "center_norm", "ema_lambda")
    return "".join(json.dumps({k: r[k] for k in keys}) + "\n" for r in records).encode("utf-8")


def save_pretrain_outputs(result, enc_cfg, out_dir):
    """Write teacher.cspk, student.cspk and loss.jsonl into ``out_dir``."""
    from pathlib import Path

    out_dir = Path(out_dir)
    enc.save_checkpoint(out_dir / "teacher.cspk", result.state.teacher, enc_cfg, "teacher")
    enc.save_checkpoint(out_dir / "student.cspk", result.state.student, enc_cfg, "student")
    atomic_write_bytes(out_dir / "loss.jsonl", loss_log_bytes(result.log))
    return out_dir / "teacher.cspk", out_dir / "student.cspk", out_dir / "loss.jsonl"


def config_dict(cfg):
    return asdict(cfg)
