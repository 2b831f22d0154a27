"""Supervised finetuning with an additive angular margin softmax.

The backbone (frame layers, pooling, embedding layer) is taken verbatim from
a pretrained checkpoint or initialized at random; the projection head is
dropped and replaced by a cosine classifier with one row per speaker.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import encoder as enc
from .corpus import atomic_write_bytes, load_utterance, read_manifest
from .dino import Augmentation, augment
from .errors import ConfigError, InvalidInputError, InvalidRoleError
from .numerics import Rng, l2_normalize, log_softmax
from .optim import SGD

log = logging.getLogger(__name__)

INIT_CHOICES = ("teacher_ckpt", "student_ckpt", "random")


@dataclass
class LargeMarginConfig:
    enabled: bool = False
    extra_epochs: int = 5
    margin_lm: float = 0.5
    crop_len_lm: int = 300


@dataclass
class FinetuneConfig:
    init: str = "teacher_ckpt"
    init_checkpoint: str = ""
    epochs: int = 50
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    aam_scale: float = 32.0
    aam_margin: float = 0.2
    large_margin: LargeMarginConfig = field(default_factory=LargeMarginConfig)
    crop_len: int = 200
    batch_size: int = 32
    augment: bool = False
    augmentation: Augmentation = field(default_factory=Augmentation)
    freeze_backbone: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.large_margin, dict):
            self.large_margin = LargeMarginConfig(**self.large_margin)
        if isinstance(self.augmentation, dict):
            self.augmentation = Augmentation(**self.augmentation)
        if self.init not in INIT_CHOICES:
            raise ConfigError(f"finetune.init must be one of {INIT_CHOICES}")
        if not self.aam_scale > 0:
            raise ConfigError("finetune.aam_scale must be positive")
        if not 0 <= self.aam_margin < math.pi / 2:
            raise ConfigError("finetune.aam_margin must lie in [0, pi/2)")
        if self.crop_len < 2 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("finetune: crop_len >= 2, batch_size >= 1, epochs >= 0")
        lm = self.large_margin
        if lm.enabled:
            if lm.margin_lm < self.aam_margin or lm.margin_lm >= math.pi / 2:
                raise ConfigError("large_margin.margin_lm must lie in [aam_margin, pi/2)")
            if lm.crop_len_lm < self.crop_len:
                raise ConfigError("large_margin.crop_len_lm must be >= crop_len")


def init_from_pretrained(checkpoint, num_speakers, rng, enc_cfg=None):
    """Backbone parameters plus a fresh ``(num_speakers, E)`` classifier.

    ``checkpoint`` is a loaded :class:`~cascade_spk.encoder.Checkpoint` or
    ``None`` for random initialization (then ``enc_cfg`` is required).
    Returns ``(backbone, classifier, encoder_config)``.
    """
    if num_speakers < 2:
        raise ConfigError("finetuning needs at least two speakers")
    if checkpoint is None:
        if enc_cfg is None:
            raise ConfigError("random initialization needs an encoder config")
        backbone = enc.init_params(enc_cfg, rng, with_head=False)
    else:
        if checkpoint.role not in ("teacher", "student"):
            raise InvalidRoleError(f"cannot finetune from a {checkpoint.role!r} checkpoint")
        enc_cfg = checkpoint.config
        backbone = {k: v.copy() for k, v in checkpoint.backbone().items()}
    classifier = enc.glorot_uniform(rng, num_speakers, enc_cfg.embedding_dim)
    return backbone, classifier, enc_cfg


def _target_phi(cos_y, margin):
    """cos(theta + m) with the fallback past theta + m > pi, and its derivative."""
    sin_m, cos_m = math.sin(margin), math.cos(margin)
    sin_y = np.sqrt(np.maximum(1.0 - cos_y ** 2, 1e-12))
    inside = cos_y > math.cos(math.pi - margin)
    phi = np.where(inside, cos_y * cos_m - np.sqrt(np.maximum(1.0 - cos_y ** 2, 0.0)) * sin_m,
                   cos_y - margin * sin_m)
    dphi = np.where(inside, cos_m + sin_m * cos_y / sin_y, 1.0)
    return phi, dphi


def aam_logits(embedding, weights, scale, margin, labels=None):
    """Scaled cosine logits, with the angular margin on the true class when
    ``labels`` is given."""
    e = np.asarray(embedding, dtype=np.float64)
    single = e.ndim == 1
    e = e[None] if single else e
    cos = np.clip(l2_normalize(e) @ l2_normalize(weights).T, -1.0, 1.0)
    logits = scale * cos
    if labels is not None:
        labels = np.atleast_1d(np.asarray(labels))
        if labels.shape[0] != e.shape[0]:
            raise InvalidInputError("one label per embedding required")
        if np.any((labels < 0) | (labels >= weights.shape[0])):
            raise InvalidInputError("label out of range")
        rows = np.arange(e.shape[0])
        phi, _ = _target_phi(cos[rows, labels], margin)
        logits[rows, labels] = scale * phi
    return logits[0] if single else logits


def aam_loss(embedding, weights, labels, scale, margin):
    """Mean softmax cross-entropy over margin logits.

    Returns ``(loss, d_embedding, d_weights, accuracy)``; accuracy uses the
    margin-free cosine logits.
    """
    e = np.asarray(embedding, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(labels)
    b = e.shape[0]
    if np.any((labels < 0) | (labels >= w.shape[0])):
        raise InvalidInputError("label out of range")
    e_norm = np.linalg.norm(e, axis=1, keepdims=True)
    w_norm = np.linalg.norm(w, axis=1, keepdims=True)
    e_hat = e / e_norm
    w_hat = w / w_norm
    cos = e_hat @ w_hat.T
    rows = np.arange(b)
    cy = np.clip(cos[rows, labels], -1.0, 1.0)
    phi, dphi = _target_phi(cy, margin)
    z = scale * cos
    z[rows, labels] = scale * phi
    logp = log_softmax(z)
    loss = float(-logp[rows, labels].mean())
    dz = np.exp(logp)
    dz[rows, labels] -= 1.0
    dz /= b
    dcos = scale * dz
    dcos[rows, labels] *= dphi
    d_ehat = dcos @ w_hat
    d_what = dcos.T @ e_hat
    d_e = (d_ehat - e_hat * np.sum(d_ehat * e_hat, axis=1, keepdims=True)) / e_norm
    d_w = (d_what - w_hat * np.sum(d_what * w_hat, axis=1, keepdims=True)) / w_norm
    accuracy = float(np.mean(np.argmax(cos, axis=1) == labels))
    return loss, d_e, d_w, accuracy


def concat_short(items, min_len):
    """Append same-label sequences (in order) until each reaches ``min_len``.

    ``items`` are ``(array, label)`` pairs; leftovers too short to reach
    ``min_len`` are dropped.
    """
    out, pending = [], {}
    for seq, label in items:
        if seq.shape[0] >= min_len:
            out.append((seq, label))
            continue
        acc = pending.get(label)
        acc = seq if acc is None else np.concatenate([acc, seq])
        if acc.shape[0] >= min_len:
            out.append((acc, label))
            pending.pop(label, None)
        else:
            pending[label] = acc
    return out


def load_labeled(manifest_path, feature_dim=None):
    manifest = read_manifest(manifest_path)
    if any(r.speaker_label is None for r in manifest):
        raise ConfigError(f"{manifest_path}: every record needs a speaker_label")
    labels = sorted({r.speaker_label for r in manifest})
    if len(labels) < 2:
        raise ConfigError("finetuning needs at least two speakers")
    if labels != list(range(len(labels))):
        raise ConfigError("speaker labels must be contiguous from 0")
    items = [(load_utterance(manifest_path, r, feature_dim).astype(np.float64), r.speaker_label)
             for r in manifest]
    return items, len(labels)


@dataclass
class FinetuneResult:
    backbone: enc.Params
    classifier: np.ndarray
    config: enc.EncoderConfig
    num_classes: int
    log: List[dict]


def train_step(backbone, classifier, crops, labels, scale, margin):
    """Loss, gradients and accuracy on one batch of equal-length crops."""
    emb, trace = enc.embed_batch(backbone, crops)
    loss, d_e, d_w, acc = aam_loss(emb, classifier, labels, scale, margin)
    grads = enc.backward(backbone, trace, d_embedding=d_e)
    return loss, grads, d_w, acc


def _crops(items, idx, length, rng, cfg):
    out = np.empty((len(idx), length, items[0][0].shape[1]))
    for n, i in enumerate(idx):
        seq = items[i][0]
        off = int(rng.integers(0, seq.shape[0] - length + 1))
        view = seq[off:off + length]
        out[n] = augment(view, cfg.augmentation, rng) if cfg.augment else view
    return out


def finetune(manifest_path, cfg, checkpoint=None, enc_cfg=None, items=None):
    """Train backbone and classifier on a labeled manifest.

    ``checkpoint`` is required unless ``cfg.init == "random"``. ``items`` may
    supply preloaded ``(array, label)`` pairs.
    """
    if cfg.init != "random" and checkpoint is None:
        raise ConfigError(f"finetune.init={cfg.init} needs a pretrained checkpoint")
    if checkpoint is not None and cfg.init != "random":
        want = "teacher" if cfg.init == "teacher_ckpt" else "student"
        if checkpoint.role != want:
            raise InvalidRoleError(f"init={cfg.init} but checkpoint role is {checkpoint.role!r}")
    dim = checkpoint.config.feature_dim if checkpoint is not None else enc_cfg.feature_dim
    if items is None:
        items, n_cls = load_labeled(manifest_path, dim)
    else:
        n_cls = len({l for _, l in items})
        if n_cls < 2:
            raise ConfigError("finetuning needs at least two speakers")
    rng = Rng(cfg.seed)
    init_rng, order_rng, crop_rng = rng.spawn(3)
    backbone, classifier, enc_cfg = init_from_pretrained(
        None if cfg.init == "random" else checkpoint, n_cls, init_rng, enc_cfg)

    stages = [(cfg.epochs, cfg.aam_margin, cfg.crop_len)]
    if cfg.large_margin.enabled:
        lm = cfg.large_margin
        stages.append((lm.extra_epochs, lm.margin_lm, lm.crop_len_lm))
    opt = SGD(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    records, step, epoch_no = [], 0, 0
    for epochs, margin, crop_len in stages:
        stage_items = concat_short(items, crop_len)
        if not stage_items:
            raise ConfigError(f"no utterances reach crop length {crop_len}")
        labels_all = np.array([l for _, l in stage_items])
        for _ in range(epochs):
            perm = order_rng.permutation(len(stage_items))
            for b in range(0, len(perm), cfg.batch_size):
                idx = perm[b:b + cfg.batch_size]
                crops = _crops(stage_items, idx, crop_len, crop_rng, cfg)
                loss, grads, d_w, acc = train_step(
                    backbone, classifier, crops, labels_all[idx], cfg.aam_scale, margin)
                params = {"classifier.weight": classifier}
                all_grads = {"classifier.weight": d_w}
                if not cfg.freeze_backbone:
                    params.update(backbone)
                    all_grads.update(grads)
                new = opt.step(params, all_grads)
                classifier = new.pop("classifier.weight")
                if not cfg.freeze_backbone:
                    backbone = new
                step += 1
                records.append({"step": step, "epoch": epoch_no, "loss": loss,
                                "train_accuracy": acc, "margin_in_effect": margin})
            epoch_no += 1
    return FinetuneResult(backbone=backbone, classifier=classifier, config=enc_cfg,
                          num_classes=n_cls, log=records)


def save_finetuned(path, result):
    params = dict(result.backbone)
    params["classifier.weight"] = result.classifier
    enc.save_checkpoint(path, params, result.config, "finetuned", num_classes=result.num_classes)


def train_log_bytes(records):
    keys = ("step", "epoch", "loss", "train_accuracy", "margin_in_effect")
    return "".join(json.dumps({k: r[k] for k in keys}) + "\n" for r in records).encode("utf-8")


def save_train_log(path, records):
    atomic_write_bytes(path, train_log_bytes(records))
