"""Vector-neuron layers and the networks built from them.

Vector feature maps are stored channel-last, ``(..., 3, C)``: every channel is
a 3-vector and linear layers only mix channels, so right-multiplying the
coordinates by a rotation commutes with every layer here.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ContractError, DimensionError
from .geometry import knn_indices

EPS = 1e-8


def _uniform_(w: torch.Tensor, fan_in: int) -> torch.Tensor:
    # He-style bound for a leaky ReLU with slope 0.2: keeps vector norms
    # roughly constant through depth (there is no normalisation layer)
    bound = math.sqrt(6.0 / (1.04 * fan_in))
    with torch.no_grad():
        return w.uniform_(-bound, bound)


def vn_linear(V: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """Channel mixing ``out[..., :, c'] = sum_c W[c', c] V[..., :, c]``."""
    if V.shape[-2] != 3:
        raise DimensionError(f"vector features need a size-3 axis at -2, got {tuple(V.shape)}")
    if V.shape[-1] != W.shape[1]:
        raise DimensionError(f"vn_linear: features have {V.shape[-1]} channels, weight {tuple(W.shape)}")
    return V @ W.transpose(0, 1)


def _leaky_along(V, d, slope):
    # same as normalising d by (|d| + EPS) first, with fewer full-size ops
    length = (d * d).sum(-2, keepdim=True).clamp_min(1e-30).sqrt()
    coef = torch.clamp((V * d).sum(-2, keepdim=True), max=0.0) * ((slope - 1.0) / (length + EPS) ** 2)
    return V + coef * d


def vn_leaky_relu(V: torch.Tensor, W_dir: torch.Tensor, slope: float = 0.2) -> torch.Tensor:
    """Leaky ReLU along a learned, co-rotating direction per channel.

    The component of ``v`` along the unit direction ``d`` is kept when
    ``<v, d> >= 0`` and scaled by ``slope`` otherwise.
    """
    if not 0.0 <= slope < 1.0:
        raise ContractError(f"slope must be in [0, 1), got {slope}")
    return _leaky_along(V, vn_linear(V, W_dir), slope)


def learned_max(V: torch.Tensor, W_dir: torch.Tensor, dim: int) -> torch.Tensor:
    """Per channel, pick the entry along ``dim`` with the largest projection
    onto its learned direction. ``dim`` must index a non-vector axis."""
    d = vn_linear(V, W_dir)
    score = (V * d).sum(-2, keepdim=True)
    idx = score.max(dim=dim, keepdim=True).indices.expand(*[1 if i == (dim % V.dim()) else s for i, s in enumerate(V.shape)])
    return torch.gather(V, dim, idx).squeeze(dim)


def vn_pool(V: torch.Tensor, mode: str = "mean", W_dir: torch.Tensor | None = None) -> torch.Tensor:
    """Pool ``(..., n, 3, C)`` over the point axis to ``(..., 3, C)``."""
    if V.shape[-3] < 1:
        raise ContractError("cannot pool an empty point cloud")
    if mode == "mean":
        return V.mean(dim=-3)
    if mode == "learned_max":
        if W_dir is None:
            raise ContractError("learned_max pooling needs a direction weight")
        return learned_max(V, W_dir, dim=-3)
    raise ValueError(f"unknown pooling mode {mode!r}")


def gather_neighbors(V: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``(M, n, 3, C)`` features and ``(M, n, k)`` indices -> ``(M, n, k, 3, C)``."""
    M, n = V.shape[0], V.shape[1]
    offset = (torch.arange(M, device=V.device) * n).view(M, 1, 1)
    flat = V.reshape(M * n, *V.shape[2:])
    return flat[(idx + offset).reshape(-1)].reshape(*idx.shape, *V.shape[2:])


def knn_edge_conv(V, idx, W, W_dir, W_pool, slope=0.2):
    """Edge convolution on vector features.

    The edge feature ``[v_j - v_i, v_i]`` is mapped by ``W`` (shape
    ``C' x 2C``), passed through the vector leaky ReLU and max-aggregated over
    the ``k`` neighbours along learned directions.
    """
    C = V.shape[-1]
    if W.shape[1] != 2 * C:
        raise DimensionError(f"edge weight {tuple(W.shape)} does not match {C} input channels")
    W_nbr, W_ctr = W[:, :C], W[:, C:]
    # W [v_j - v_i, v_i] = W_nbr v_j + (W_ctr - W_nbr) v_i
    nbr = gather_neighbors(vn_linear(V, W_nbr), idx)
    ctr = vn_linear(V, W_ctr - W_nbr).unsqueeze(2)
    edges = vn_leaky_relu(nbr + ctr, W_dir, slope)
    return learned_max(edges, W_pool, dim=2)


class VNLinear(nn.Module):
    def __init__(self, c_in, c_out, fan_in=None):
        super().__init__()
        self.weight = nn.Parameter(_uniform_(torch.empty(c_out, c_in), fan_in or c_in))

    def forward(self, V):
        return vn_linear(V, self.weight)


class PlainLinear(nn.Module):
    """Debug replacement for VNLinear that also mixes the xyz axis.

    Breaks rotation equivariance on purpose; used as a negative control.
    """

    def __init__(self, c_in, c_out, fan_in=None):
        super().__init__()
        self.c_out = c_out
        self.weight = nn.Parameter(_uniform_(torch.empty(3 * c_out, 3 * c_in), 3 * (fan_in or c_in)))

    def forward(self, V):
        flat = V.reshape(*V.shape[:-2], -1) @ self.weight.transpose(0, 1)
        return flat.reshape(*V.shape[:-2], 3, self.c_out)


def _linear(c_in, c_out, plain, fan_in=None):
    return PlainLinear(c_in, c_out, fan_in) if plain else VNLinear(c_in, c_out, fan_in)


class VNLeakyReLU(nn.Module):
    def __init__(self, channels, slope=0.2, plain=False):
        super().__init__()
        self.direction = _linear(channels, channels, plain)
        self.slope = slope

    def forward(self, V):
        return _leaky_along(V, self.direction(V), self.slope)


class LearnedMax(nn.Module):
    def __init__(self, channels, plain=False):
        super().__init__()
        self.direction = _linear(channels, channels, plain)

    def forward(self, V, dim):
        score = (V * self.direction(V)).sum(-2, keepdim=True)
        shape = list(V.shape)
        shape[dim % V.dim()] = 1
        idx = score.max(dim=dim, keepdim=True).indices.expand(*shape)
        return torch.gather(V, dim, idx).squeeze(dim)


class EdgeConv(nn.Module):
    def __init__(self, c_in, c_out, slope=0.2, plain=False):
        super().__init__()
        self.c_in = c_in
        self.neighbor = _linear(c_in, c_out, plain, fan_in=2 * c_in)
        self.center = _linear(c_in, c_out, plain, fan_in=2 * c_in)
        self.relu = VNLeakyReLU(c_out, slope, plain)
        self.pool = LearnedMax(c_out, plain)

    def forward(self, V, idx):
        # neighbor/center split of the 2C-wide edge map; see knn_edge_conv
        a = self.neighbor(V)
        nbr = gather_neighbors(a, idx)
        ctr = (self.center(V) - a).unsqueeze(2)
        return self.pool(self.relu(nbr + ctr), dim=2)

    def edge_weight(self):
        """The equivalent ``C' x 2C`` weight acting on ``[v_j - v_i, v_i]``."""
        return torch.cat([self.neighbor.weight, self.center.weight], dim=1)


class VNEncoder(nn.Module):
    """VN-DGCNN trunk with an equivariant head and a frame head.

    ``forward`` maps centered clouds ``(M, n, 3)`` to two ``(M, f, 3)``
    equivariant features: ``F`` and ``frame``. The invariant feature is
    ``F @ frame^T``.
    """

    def __init__(self, f=64, k=16, channels=21, blocks=3, slope=0.2, plain=False):
        super().__init__()
        self.f, self.k = f, k
        widths = [1] + [channels] * blocks
        self.blocks = nn.ModuleList(EdgeConv(a, b, slope, plain) for a, b in zip(widths[:-1], widths[1:]))
        self.mix = _linear(channels * blocks, 2 * channels, plain)
        self.mix_relu = VNLeakyReLU(2 * channels, slope, plain)
        self.equiv_head = _linear(2 * channels, f, plain)
        self.frame_head = _linear(2 * channels, f, plain)

    def trunk(self, P):
        if P.dim() != 3 or P.shape[-1] != 3:
            raise DimensionError(f"expected (M, n, 3) clouds, got {tuple(P.shape)}")
        if P.shape[1] < self.k + 1:
            raise ContractError(f"part has {P.shape[1]} points, needs at least k+1={self.k + 1}")
        V = P.unsqueeze(-1)
        idx = knn_indices(P, self.k)
        outs = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                idx = knn_indices(V.flatten(-2), self.k)
            V = block(V, idx)
            outs.append(V)
        return self.mix_relu(self.mix(torch.cat(outs, dim=-1)))

    def forward(self, P):
        h = self.trunk(P)
        F = vn_pool(self.equiv_head(h)).transpose(-1, -2)
        frame = vn_pool(self.frame_head(h)).transpose(-1, -2)
        return F, frame

    def equivariant(self, P):
        return self(P)[0]

    def invariant(self, P):
        F, frame = self(P)
        return F @ frame.transpose(-1, -2)


def mlp(widths, final_activation=False):
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(widths) - 2 or final_activation:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class CanonicalDecoder(nn.Module):
    """``(M, f, f)`` invariant features -> ``(M, n, 3)`` canonical clouds."""

    def __init__(self, f=64, n=512, hidden=512):
        super().__init__()
        self.n = n
        self.net = mlp([f * f, hidden, hidden, 3 * n])

    def forward(self, G):
        return self.net(G.flatten(-2)).view(*G.shape[:-2], self.n, 3)


class Discriminator(nn.Module):
    """PointNet-style scorer: shared point MLP, max pool, MLP head."""

    def __init__(self):
        super().__init__()
        self.point = mlp([3, 64, 128], final_activation=True)
        self.head = mlp([128, 64, 1])

    def forward(self, P):
        return self.head(self.point(P).max(dim=-2).values).squeeze(-1)
