"""Differentiable array substrate.

Reverse-mode differentiation is delegated to torch autograd (define-by-run,
the graph is rebuilt on every forward pass). This module pins down the
contracts the rest of the package relies on: loud shape errors, scalar-only
``backward``, an explicit Adam state and the ``EQAS`` checkpoint container.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import CheckpointError, ContractError, DimensionError

Tensor = torch.Tensor

DTYPE = torch.float32
CHECKPOINT_MAGIC = b"EQAS"
CHECKPOINT_VERSION = 1


def tensor(data, requires_grad: bool = False, dtype=DTYPE) -> Tensor:
    return torch.tensor(np.asarray(data), dtype=dtype, requires_grad=requires_grad)


def _batch_compatible(a: Sequence[int], b: Sequence[int]) -> bool:
    if len(a) != len(b):
        # leading batch dims only: a bare matrix broadcasts against a batch
        return len(a) == 0 or len(b) == 0
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a @ b`` with shape checking."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2] or not _batch_compatible(a.shape[:-2], b.shape[:-2]):
        raise DimensionError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Pointwise ``add``/``sub``/``mul``/``scale``/``negate``.

    Operands must have equal shapes unless one of them is a Python scalar.
    """
    if op == "negate":
        return -a
    if op == "scale":
        if isinstance(b, Tensor):
            raise DimensionError("scale expects a scalar factor")
        return a * float(b)
    if op not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise op {op!r}")
    if isinstance(b, Tensor) and b.dim() > 0 and tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    return a * b


def reduce(op: str, a: Tensor, axis: int) -> Tensor:
    """Reduce along ``axis``. ``max`` routes the gradient to the argmax only."""
    if not -a.dim() <= axis < a.dim():
        raise DimensionError(f"axis {axis} invalid for shape {tuple(a.shape)}")
    if op == "sum":
        return a.sum(dim=axis)
    if op == "mean":
        return a.mean(dim=axis)
    if op == "max":
        # gather-based so ties go to the first index and backward is a
        # one-hot scatter
        idx = a.argmax(dim=axis, keepdim=True)
        return torch.gather(a, axis, idx).squeeze(axis)
    raise ValueError(f"unknown reduction {op!r}")


def backward(root: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of scalar ``root`` w.r.t. ``params``; unused params get zeros."""
    if root.numel() != 1:
        raise ContractError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    params = list(params)
    grads = torch.autograd.grad(root.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first: list[Tensor] = field(default_factory=list)
    second: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.step_count < 0:
            raise ContractError("step_count must be non-negative")


@torch.no_grad()
def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: OptimizerState) -> OptimizerState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} gradients")
    if not state.first:
        state.first = [torch.zeros_like(p) for p in params]
        state.second = [torch.zeros_like(p) for p in params]
    for p, g, m in zip(params, grads, state.first):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam shapes disagree: param {tuple(p.shape)}, grad {tuple(g.shape)}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first, state.second):
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / corr2).sqrt_().add_(state.epsilon)
        p.addcdiv_(m / corr1, denom, value=-state.learning_rate)
    return state


def optimizer_tensors(prefix: str, names: Sequence[str], state: OptimizerState) -> dict[str, Tensor]:
    """Flatten an Adam state into named tensors for checkpointing."""
    out = {f"{prefix}.step": torch.tensor([float(state.step_count)])}
    for name, m, v in zip(names, state.first, state.second):
        out[f"{prefix}.m.{name}"] = m
        out[f"{prefix}.v.{name}"] = v
    return out


def restore_optimizer(prefix: str, names: Sequence[str], tensors: Mapping[str, Tensor], state: OptimizerState) -> None:
    key = f"{prefix}.step"
    if key not in tensors:
        return
    state.step_count = int(tensors[key].item())
    if all(f"{prefix}.m.{n}" in tensors for n in names):
        state.first = [tensors[f"{prefix}.m.{n}"].clone() for n in names]
        state.second = [tensors[f"{prefix}.v.{n}"].clone() for n in names]


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]]) -> None:
    """Write named tensors as little-endian f32 records after an ``EQAS`` header."""
    items = tensors.items() if isinstance(tensors, Mapping) else tensors
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, t in items:
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, Tensor] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = math.prod(dims)
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record at byte {pos}") from exc
    return out
