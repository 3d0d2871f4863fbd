"""Teacher-to-student distillation: layer selection and the loss stack.

The student copies a depth-wise subset of teacher layers and then matches
the teacher's logits, attention score maps, and hidden states at the
selected layers. Every component is a sum over student layers of per-layer
mean squared error; invalid positions (padding, causally masked keys) are
excluded from the means.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import ForwardTrace, SeqModel, param_specs
from .tensor import Tensor, add, cross_entropy, mse, reshape


@dataclass(frozen=True)
class DistillConfig:
    """Student depth. Width always matches the teacher."""

    enc_layers: int
    dec_layers: int

    def __post_init__(self):
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("student needs at least one layer per stack")


@dataclass(frozen=True)
class LayerMap:
    """Student-layer index -> teacher-layer index, per stack."""

    enc: tuple[int, ...]
    dec: tuple[int, ...]


def select_layers(teacher_layers: int, student_layers: int) -> list[int]:
    """Evenly spaced teacher layers for the student to inherit and match.

    A single-layer student takes the teacher's last layer; otherwise
    student layer i maps to round(i * (teacher-1) / (student-1)), rounding
    half away from zero, which keeps the first and last layers anchored.
    """
    if not 1 <= student_layers <= teacher_layers:
        raise ValueError(
            f"student layer count {student_layers} must lie in [1, {teacher_layers}]"
        )
    if student_layers == 1:
        return [teacher_layers - 1]
    span = (teacher_layers - 1) / (student_layers - 1)
    return [int(np.floor(i * span + 0.5)) for i in range(student_layers)]


def init_student(teacher: SeqModel, config: DistillConfig) -> tuple[SeqModel, LayerMap]:
    """Build a student whose layers are deep copies of mapped teacher layers.

    Embeddings and final layer norms copy over directly. The returned
    student shares no storage with the teacher.
    """
    tcfg = teacher.config
    if config.enc_layers > tcfg.n_enc_layers or config.dec_layers > tcfg.n_dec_layers:
        raise ValueError(
            f"student depth {config.enc_layers}+{config.dec_layers} exceeds teacher "
            f"{tcfg.n_enc_layers}+{tcfg.n_dec_layers}"
        )
    lmap = LayerMap(
        enc=tuple(select_layers(tcfg.n_enc_layers, config.enc_layers)),
        dec=tuple(select_layers(tcfg.n_dec_layers, config.dec_layers)),
    )
    scfg = replace(tcfg, n_enc_layers=config.enc_layers, n_dec_layers=config.dec_layers)
    params: dict[str, Tensor] = {}
    for name, _, _ in param_specs(scfg):
        src_name = name
        for stack, mapping in (("enc.", lmap.enc), ("dec.", lmap.dec)):
            if name.startswith(stack) and name[len(stack)].isdigit():
                idx, rest = name[len(stack):].split(".", 1)
                src_name = f"{stack}{mapping[int(idx)]}.{rest}"
                break
        params[name] = Tensor(
            teacher.params[src_name].data.copy(), requires_grad=True, name=name
        )
    return SeqModel(scfg, params), lmap


@dataclass
class LossBreakdown:
    """Scalar loss tensors for one training step.

    dist is logits + (attention sum) + (hidden sum); total is task + dist,
    built with exactly that association so the identities hold bit-for-bit.
    """

    task: Tensor
    logits: Tensor
    enc_attn: Tensor
    dec_attn: Tensor
    cross_attn: Tensor
    enc_hidden: Tensor
    dec_hidden: Tensor
    dist: Tensor
    total: Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            "task": self.task.item(),
            "logits": self.logits.item(),
            "enc_attn": self.enc_attn.item(),
            "dec_attn": self.dec_attn.item(),
            "cross_attn": self.cross_attn.item(),
            "enc_hidden": self.enc_hidden.item(),
            "dec_hidden": self.dec_hidden.item(),
            "dist": self.dist.item(),
            "total": self.total.item(),
        }


def _expand(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.broadcast_to(mask, shape)


def _layer_sum(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc


def _attn_masks(student: ForwardTrace):
    """Validity masks for the three attention score families."""
    sv, tv = student.src_valid, student.tgt_valid
    lt = tv.shape[1]
    causal = np.tril(np.ones((lt, lt), dtype=bool))
    ea = sv[:, None, :, None] & sv[:, None, None, :]
    da = tv[:, None, :, None] & tv[:, None, None, :] & causal[None, None]
    ca = tv[:, None, :, None] & sv[:, None, None, :]
    return ea, da, ca


def logits_loss(student: ForwardTrace, teacher: ForwardTrace) -> Tensor:
    """MSE between logits over the full vocabulary at non-pad target positions."""
    mask = _expand(student.tgt_valid[:, :, None], student.logits.shape)
    return mse(student.logits, teacher.logits, mask=mask)


def attention_loss(
    student: ForwardTrace, teacher: ForwardTrace, layer_map: LayerMap
) -> tuple[Tensor, Tensor, Tensor]:
    """Per-family sums over student layers of masked score MSE."""
    ea_mask, da_mask, ca_mask = _attn_masks(student)
    enc = _layer_sum(
        [
            mse(s, teacher.enc_attn[m], mask=_expand(ea_mask, s.shape))
            for s, m in zip(student.enc_attn, layer_map.enc)
        ]
    )
    dec = _layer_sum(
        [
            mse(s, teacher.dec_attn[m], mask=_expand(da_mask, s.shape))
            for s, m in zip(student.dec_attn, layer_map.dec)
        ]
    )
    cross = _layer_sum(
        [
            mse(s, teacher.cross_attn[m], mask=_expand(ca_mask, s.shape))
            for s, m in zip(student.cross_attn, layer_map.dec)
        ]
    )
    return enc, dec, cross


def hidden_loss(
    student: ForwardTrace, teacher: ForwardTrace, layer_map: LayerMap
) -> tuple[Tensor, Tensor]:
    """Per-stack sums over student layers of hidden-state MSE at real positions."""
    enc_mask = student.src_valid[:, :, None]
    dec_mask = student.tgt_valid[:, :, None]
    enc = _layer_sum(
        [
            mse(s, teacher.enc_hidden[m], mask=_expand(enc_mask, s.shape))
            for s, m in zip(student.enc_hidden, layer_map.enc)
        ]
    )
    dec = _layer_sum(
        [
            mse(s, teacher.dec_hidden[m], mask=_expand(dec_mask, s.shape))
            for s, m in zip(student.dec_hidden, layer_map.dec)
        ]
    )
    return enc, dec


def task_loss(student: ForwardTrace, labels: np.ndarray, pad_id: int) -> Tensor:
    """Cross-entropy of the gold labels, ignoring padded positions."""
    b, t, v = student.logits.shape
    flat = reshape(student.logits, (b * t, v))
    return cross_entropy(flat, np.asarray(labels, np.int64).reshape(-1), ignore_id=pad_id)


def total_loss(
    student: ForwardTrace,
    teacher: ForwardTrace | None,
    labels: np.ndarray,
    layer_map: LayerMap | None,
    pad_id: int,
) -> LossBreakdown:
    """Task loss plus, when a teacher is given, the full distillation stack.

    Without a teacher every distillation component is a zero constant and
    total reduces to the task loss.
    """
    task = task_loss(student, labels, pad_id)
    if teacher is None:
        zero = Tensor(np.float32(0.0))
        dist = zero
        return LossBreakdown(task, zero, zero, zero, zero, zero, zero, dist, add(task, dist))
    if layer_map is None:
        raise ValueError("distillation against a teacher needs a layer map")
    lg = logits_loss(student, teacher)
    ea, da, ca = attention_loss(student, teacher, layer_map)
    eh, dh = hidden_loss(student, teacher, layer_map)
    dist = add(add(lg, _layer_sum([ea, da, ca])), _layer_sum([eh, dh]))
    total = add(task, dist)
    return LossBreakdown(task, lg, ea, da, ca, eh, dh, dist, total)
