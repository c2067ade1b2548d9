"""Part-correlation features and pose prediction.

Each part is centered on its own centroid, encoded into an equivariant
``F_i`` (f x 3) and an invariant ``G_i`` (f x f), and mixed with the other
parts of the same object as ``H_i = mean_{j != i} G_j @ F_i``. Two MLP heads
read the flattened ``H_i`` and emit a rotation (via 6D Gram-Schmidt) and the
canonical-frame position of the part's centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ContractError, DimensionError
from .geometry import Pose
from .vn import CanonicalDecoder, VNEncoder, mlp


def center(P):
    """Shift a cloud so its centroid sits at the origin.

    Returns ``(centered, centroid)``; works on ``(..., n, 3)`` numpy arrays or
    tensors.
    """
    if P.shape[-2] == 0:
        raise ContractError("cannot center an empty point cloud")
    if isinstance(P, torch.Tensor):
        c = P.mean(dim=-2, keepdim=True)
    else:
        c = np.mean(P, axis=-2, keepdims=True)
    return P - c, c[..., 0, :]


def part_correlation(G_j, F_i):
    """``C_ij = G_j @ F_i``: equivariant in part i, invariant in part j."""
    if G_j.shape[-1] != G_j.shape[-2] or G_j.shape[-1] != F_i.shape[-2] or F_i.shape[-1] != 3:
        raise DimensionError(f"part_correlation expects (f, f) and (f, 3), got {tuple(G_j.shape)} and {tuple(F_i.shape)}")
    return G_j @ F_i


def aggregate(features, i):
    """Correlation-aware feature of part ``i`` from a list of ``(F, G)`` pairs."""
    N = len(features)
    if N < 2:
        raise ContractError("need at least two parts to aggregate correlations")
    F_i = features[i][0]
    total = sum(part_correlation(G_j, F_i) for j, (_, G_j) in enumerate(features) if j != i)
    return total / (N - 1)


def aggregate_batched(F, G, sample_index, num_samples):
    """Vectorised aggregate over a flat list of parts from several objects.

    ``F`` is ``(M, f, 3)``, ``G`` is ``(M, f, f)`` and ``sample_index`` maps
    every part to its object. Uses ``sum_{j != i} G_j = sum_j G_j - G_i``.
    """
    counts = torch.bincount(sample_index, minlength=num_samples)
    if bool((counts[sample_index] < 2).any()):
        raise ContractError("every object needs at least two parts")
    G_sum = torch.zeros(num_samples, *G.shape[1:], dtype=G.dtype, device=G.device)
    G_sum = G_sum.index_add(0, sample_index, G)
    others = (G_sum[sample_index] - G) / (counts[sample_index] - 1).to(G.dtype).view(-1, 1, 1)
    return others @ F


def rotation_from_6d(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Gram-Schmidt two 3-vectors into a rotation whose rows are ``b1, b2, b1 x b2``.

    Near-zero or near-collinear inputs fall back to a fixed axis, so the
    output is always a proper rotation and never NaN.
    """
    a1, a2 = x[..., :3], x[..., 3:6]
    ex = torch.zeros_like(a1)
    ex[..., 0] = 1.0
    n1 = a1.norm(dim=-1, keepdim=True)
    b1 = torch.where(n1 > eps, a1 / n1.clamp_min(eps), ex)
    u = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    nu = u.norm(dim=-1, keepdim=True)
    # fallback: the coordinate axis least aligned with b1
    axis = torch.nn.functional.one_hot(b1.abs().argmin(dim=-1), 3).to(x.dtype)
    v = axis - (b1 * axis).sum(-1, keepdim=True) * b1
    v = v / v.norm(dim=-1, keepdim=True)
    b2 = torch.where(nu > eps, u / nu.clamp_min(eps), v)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-2)


@dataclass
class ModelConfig:
    f: int = 64
    k: int = 16
    n: int = 512
    channels: int = 21
    head_width: int = 256
    decoder_width: int = 512
    slope: float = 0.2
    use_correlation: bool = True
    plain_linear: bool = False


class AssemblyNet(nn.Module):
    """Encoders, correlation module, pose heads and canonical decoder."""

    def __init__(self, cfg: ModelConfig | None = None, **overrides):
        super().__init__()
        cfg = cfg or ModelConfig()
        for key, value in overrides.items():
            setattr(cfg, key, value)
        self.cfg = cfg
        f = cfg.f
        self.encoder = VNEncoder(f=f, k=cfg.k, channels=cfg.channels, slope=cfg.slope, plain=cfg.plain_linear)
        self.rot_head = mlp([3 * f, cfg.head_width, cfg.head_width, 6])
        self.trans_head = mlp([3 * f, cfg.head_width, cfg.head_width, 3])
        self.decoder = CanonicalDecoder(f=f, n=cfg.n, hidden=cfg.decoder_width)

    def encode(self, centered):
        """``(M, n, 3)`` centered parts -> ``(F, G)``."""
        F, frame = self.encoder(centered)
        return F, F @ frame.transpose(-1, -2)

    def correlate(self, F, G, sample_index, num_samples):
        if not self.cfg.use_correlation:
            return F
        return aggregate_batched(F, G, sample_index, num_samples)

    def rotation_head(self, H):
        return rotation_from_6d(self.rot_head(H.flatten(-2)))

    def translation_head(self, H):
        return self.trans_head(H.flatten(-2))

    def forward(self, parts, sample_index, num_samples):
        """Run the full pipeline on a flat batch of raw parts ``(M, n, 3)``.

        Returns a dict with per-part ``centroid``, ``F``, ``G``, ``H``, ``R``,
        ``T`` and the decoded canonical cloud ``recon``.
        """
        centered, centroid = center(parts)
        F, G = self.encode(centered)
        H = self.correlate(F, G, sample_index, num_samples)
        return {
            "centered": centered,
            "centroid": centroid,
            "F": F,
            "G": G,
            "H": H,
            "R": self.rotation_head(H),
            "T": self.translation_head(H),
            "recon": self.decoder(G),
        }

    @torch.no_grad()
    def predict_assembly(self, raw_parts) -> list[Pose]:
        """Poses for the parts of one object, as ``(P - centroid) @ R + T``."""
        if len(raw_parts) < 2:
            raise ContractError("an assembly needs at least two parts")
        dtype = next(self.parameters()).dtype
        parts = torch.stack([torch.as_tensor(np.asarray(p), dtype=dtype) for p in raw_parts])
        out = self(parts, torch.zeros(len(raw_parts), dtype=torch.long), 1)
        return [Pose(R.numpy(), T.numpy()) for R, T in zip(out["R"].double(), out["T"].double())]
