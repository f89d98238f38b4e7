"""Scions, grafted composites, and the exact fold of adaption maps into student convs.

Naming follows the grafting picture: a *scion* is a student block ``h_l``
wrapped in bias-free 1x1 channel maps so that it can stand in for teacher
block ``f_l``::

    H_l = a_l^{s->t} o h_l o a_{l-1}^{t->s}

with the input map absent for the first block and the output map absent for
the last one.
"""

from __future__ import annotations

import copy
import enum
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .netzoo import (
    ArchSpec,
    Block,
    BlockwiseNetwork,
    BoundarySignature,
    SignatureError,
    build_network,
    check_chain,
    entry_layers,
)

__all__ = [
    "AdaptionModule",
    "Direction",
    "GraftError",
    "GraftedModel",
    "WrappedScion",
    "compose_adaptions",
    "finalize_student",
    "fold_into_conv",
    "graft_block",
    "graft_prefix",
    "identity_scion",
    "make_adaption",
    "trainable_params",
    "wrap_scion",
    "wrap_student",
]


class GraftError(ValueError):
    """Boundary shapes, indices or stage/kind combinations that cannot be grafted."""


class Direction(str, enum.Enum):
    TEACHER_TO_STUDENT = "teacher_to_student"
    STUDENT_TO_TEACHER = "student_to_teacher"


class AdaptionModule(nn.Module):
    """Pointwise linear channel map: no bias, no normalization, no activation."""

    def __init__(self, in_channels: int, out_channels: int, direction: Direction | str):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ValueError(f"adaption channels must be positive, got {in_channels}->{out_channels}")
        self.direction = Direction(direction)
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            return F.conv2d(x, self.weight[:, :, None, None])
        return F.linear(x, self.weight)

    def set_identity_(self) -> "AdaptionModule":
        if self.in_channels != self.out_channels:
            raise GraftError("identity adaption requires equal in/out channels")
        with torch.no_grad():
            self.weight.copy_(torch.eye(self.in_channels))
        return self

    def extra_repr(self) -> str:
        return f"{self.in_channels}->{self.out_channels}, {self.direction.value}"


def make_adaption(in_channels: int, out_channels: int, direction: Direction | str, seed: int) -> AdaptionModule:
    """He-initialized adaption map; identical weights for identical arguments."""
    module = AdaptionModule(in_channels, out_channels, direction)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="linear", generator=gen)
    return module


class WrappedScion(nn.Module):
    def __init__(
        self,
        index: int,
        core: Block,
        pre: AdaptionModule | None,
        post: AdaptionModule | None,
        num_blocks: int,
    ):
        super().__init__()
        self.index = index
        self.num_blocks = num_blocks
        self.pre = pre
        self.core = core
        self.post = post

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pre is not None:
            x = self.pre(x)
        x = self.core(x)
        if self.post is not None:
            x = self.post(x)
        return x

    def adaption_shapes(self) -> dict:
        return {
            "pre": None if self.pre is None else list(self.pre.weight.shape),
            "post": None if self.post is None else list(self.post.weight.shape),
        }


def wrap_scion(
    h_l: Block,
    l: int,
    L: int,
    teacher_sigs: Sequence[BoundarySignature],
    seed: int,
) -> WrappedScion:
    """Wrap student block ``h_l`` (1-based ``l``) so it fits teacher boundary shapes.

    The block is used as-is (not copied). Adaption maps are created even when
    teacher and student widths agree, so every scion has the same structure.
    """
    if not 1 <= l <= L:
        raise GraftError(f"block index {l} outside 1..{L}")
    if len(teacher_sigs) != L:
        raise GraftError(f"expected {L} teacher signatures, got {len(teacher_sigs)}")
    t_sig, s_sig = teacher_sigs[l - 1], h_l.signature
    if s_sig.spatial_stride != t_sig.spatial_stride:
        raise GraftError(
            f"block {l}: student stride {s_sig.spatial_stride} != teacher stride {t_sig.spatial_stride}"
        )
    if s_sig.input_resolution != t_sig.input_resolution:
        raise GraftError(
            f"block {l}: student input resolution {s_sig.input_resolution} != teacher {t_sig.input_resolution}"
        )
    pre = post = None
    if l > 1:
        pre = make_adaption(t_sig.in_channels, s_sig.in_channels, Direction.TEACHER_TO_STUDENT, seed)
    elif s_sig.in_channels != t_sig.in_channels:
        raise GraftError(f"block 1: student input channels {s_sig.in_channels} != teacher {t_sig.in_channels}")
    if l < L:
        post = make_adaption(s_sig.out_channels, t_sig.out_channels, Direction.STUDENT_TO_TEACHER, seed + 1)
    elif s_sig.out_channels != t_sig.out_channels:
        raise GraftError(f"block {L}: student logits {s_sig.out_channels} != teacher logits {t_sig.out_channels}")
    return WrappedScion(l, h_l, pre, post, L)


def wrap_student(student: BlockwiseNetwork, teacher: BlockwiseNetwork, seed: int) -> list[WrappedScion]:
    """Wrap every block of ``student`` (blocks are taken over, not copied)."""
    if student.num_blocks != teacher.num_blocks:
        raise GraftError(f"student has {student.num_blocks} blocks, teacher has {teacher.num_blocks}")
    if student.head is not None or teacher.head is not None:
        raise GraftError("separate heads are not graftable; fold the head into the last block")
    L = teacher.num_blocks
    sigs = teacher.signatures
    return [wrap_scion(student.blocks[l - 1], l, L, sigs, seed + 2 * l) for l in range(1, L + 1)]


def identity_scion(teacher: BlockwiseNetwork, l: int) -> WrappedScion:
    """Scion whose core is a copy of teacher block ``l`` and whose adaptions are identities."""
    L = teacher.num_blocks
    scion = wrap_scion(copy.deepcopy(teacher.blocks[l - 1]), l, L, teacher.signatures, seed=0)
    for a in (scion.pre, scion.post):
        if a is not None:
            a.set_identity_()
    return scion


class GraftedModel(nn.Module):
    """Teacher with one scion (``block_graft``) or a scion prefix (``net_graft``) swapped in.

    The teacher is held by reference and always runs in inference mode;
    ``train()`` only affects the scions.
    """

    def __init__(self, kind: str, teacher: BlockwiseNetwork, scions: Sequence[WrappedScion], depth: int):
        super().__init__()
        if kind not in ("block_graft", "net_graft"):
            raise GraftError(f"unknown graft kind {kind!r}")
        self.kind = kind
        self.teacher = teacher
        self.scions = nn.ModuleDict({str(s.index): s for s in scions})
        self.depth = depth
        self.teacher.eval()

    def train(self, mode: bool = True) -> "GraftedModel":
        self.training = mode
        for s in self.scions.values():
            s.train(mode)
        self.teacher.eval()
        return self

    def scion(self, l: int) -> WrappedScion:
        return self.scions[str(l)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for l, block in enumerate(self.teacher.blocks, start=1):
            key = str(l)
            x = self.scions[key](x) if key in self.scions else block(x)
        if self.teacher.head is not None:
            x = self.teacher.head(x)
        return x

    @property
    def teacher_blocks_used(self) -> int:
        return self.teacher.num_blocks - len(self.scions)


def _check_scion_fits(teacher: BlockwiseNetwork, scion: WrappedScion) -> None:
    L = teacher.num_blocks
    l = scion.index
    if not 1 <= l <= L or scion.num_blocks != L:
        raise GraftError(f"scion index {l} (of {scion.num_blocks}) does not fit a {L}-block teacher")
    t_sig = teacher.blocks[l - 1].signature
    in_c = scion.pre.in_channels if scion.pre is not None else scion.core.signature.in_channels
    out_c = scion.post.out_channels if scion.post is not None else scion.core.signature.out_channels
    if in_c != t_sig.in_channels or out_c != t_sig.out_channels:
        raise GraftError(
            f"scion {l} maps {in_c}->{out_c} channels, teacher block {l} maps {t_sig.in_channels}->{t_sig.out_channels}"
        )
    if scion.core.signature.spatial_stride != t_sig.spatial_stride:
        raise GraftError(
            f"scion {l} stride {scion.core.signature.spatial_stride} != teacher stride {t_sig.spatial_stride}"
        )


def graft_block(teacher: BlockwiseNetwork, scion: WrappedScion) -> GraftedModel:
    _check_scion_fits(teacher, scion)
    return GraftedModel("block_graft", teacher, [scion], depth=scion.index)


def graft_prefix(teacher: BlockwiseNetwork, scions: Sequence[WrappedScion]) -> GraftedModel:
    """Replace teacher blocks ``1..l`` by the given scions (which must be exactly that prefix)."""
    indices = [s.index for s in scions]
    if not indices or indices != list(range(1, len(indices) + 1)):
        raise GraftError(f"scions must cover a contiguous prefix 1..l in order, got indices {indices}")
    for s in scions:
        _check_scion_fits(teacher, s)
    return GraftedModel("net_graft", teacher, scions, depth=len(scions))


def trainable_params(model: GraftedModel, stage: int, l: int) -> dict[str, nn.Parameter]:
    """Parameters optimized at stage 1 (scion ``l`` only) or stage 2 depth ``l`` (scions ``1..l``)."""
    if stage == 1:
        if model.kind != "block_graft":
            raise GraftError("stage 1 trains block-grafted models")
        if str(l) not in model.scions:
            raise GraftError(f"model has no scion at index {l}")
        indices = [l]
    elif stage == 2:
        if model.kind != "net_graft":
            raise GraftError("stage 2 trains prefix-grafted models")
        if l > model.depth or l < 1:
            raise GraftError(f"depth {l} exceeds scion coverage 1..{model.depth}")
        indices = list(range(1, l + 1))
    else:
        raise GraftError(f"unknown stage {stage}")
    return {
        f"scions.{i}.{name}": p for i in indices for name, p in model.scion(i).named_parameters()
    }


# ---------------------------------------------------------------------------
# fold algebra


def compose_adaptions(a_ts: AdaptionModule, a_st: AdaptionModule) -> torch.Tensor:
    """Matrix of ``a_ts o a_st``: student out-channels at a boundary -> next student in-channels."""
    if a_st.out_channels != a_ts.in_channels:
        raise GraftError(
            f"inner dimension mismatch: s->t map outputs {a_st.out_channels} channels, "
            f"t->s map expects {a_ts.in_channels}"
        )
    with torch.no_grad():
        return a_ts.weight.detach() @ a_st.weight.detach()


def fold_into_conv(block: Block, M: torch.Tensor) -> Block:
    """Return a copy of ``block`` whose entry layers absorb the channel map ``M``.

    ``fold_into_conv(block, M)(x) == block(M x)`` where ``M x`` applies ``M``
    at every spatial position. Each entry kernel becomes
    ``W'[o, i, ...] = sum_m W[o, m, ...] M[m, i]``; biases are untouched.
    """
    M = torch.as_tensor(M)
    if M.dim() != 2 or M.shape[0] != M.shape[1]:
        raise GraftError(f"fold matrix must be square to preserve parameter count, got shape {tuple(M.shape)}")
    try:
        targets = entry_layers(block)
    except TypeError as exc:
        raise GraftError(str(exc)) from exc
    for layer in targets:
        c_in = layer.weight.shape[1]
        if c_in != M.shape[0]:
            raise GraftError(f"fold matrix is {tuple(M.shape)} but entry layer reads {c_in} channels")
    folded = copy.deepcopy(block)
    with torch.no_grad():
        for layer in entry_layers(folded):
            W = layer.weight
            Mw = M.to(dtype=W.dtype, device=W.device)
            if W.dim() == 4:
                W.copy_(torch.einsum("omuv,mi->oiuv", W, Mw))
            else:
                W.copy_(W @ Mw)
    return folded


def _template(student_spec: ArchSpec | BlockwiseNetwork) -> BlockwiseNetwork:
    if isinstance(student_spec, BlockwiseNetwork):
        return copy.deepcopy(student_spec)
    return build_network(student_spec)


def finalize_student(scions: Sequence[WrappedScion], student_spec: ArchSpec | BlockwiseNetwork) -> BlockwiseNetwork:
    """Merge adaption maps into the next block's entry convs and return a standalone student.

    The result is a fresh instance of ``student_spec`` whose state is loaded
    strictly from the folded cores, so its architecture (and parameter count)
    is exactly the bare student's.
    """
    scions = sorted(scions, key=lambda s: s.index)
    L = len(scions)
    if [s.index for s in scions] != list(range(1, L + 1)):
        raise GraftError(f"scions must cover 1..L, got {[s.index for s in scions]}")
    try:
        check_chain([s.core.signature for s in scions])
    except SignatureError as exc:
        raise GraftError(f"inconsistent student channel chain: {exc}") from exc

    student = _template(student_spec)
    if student.num_blocks != L:
        raise GraftError(f"student spec has {student.num_blocks} blocks, got {L} scions")
    folded = [copy.deepcopy(scions[0].core)]
    for l in range(1, L):
        prev, cur = scions[l - 1], scions[l]
        if prev.post is None or cur.pre is None:
            raise GraftError(f"boundary {l}: missing adaption map")
        folded.append(fold_into_conv(cur.core, compose_adaptions(cur.pre, prev.post)))
    for l, block in enumerate(folded):
        student.blocks[l].load_state_dict(block.state_dict(), strict=True)
    return student
