"""Training losses and evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .errors import ConfigError, ContractError, DimensionError
from .geometry import chamfer, euler_from_matrix, geodesic, wrap_degrees

ACOS_CLAMP = 1e-7


class _BoundedArccos(torch.autograd.Function):
    """``arccos`` of the input clipped to [-1, 1].

    The backward pass evaluates the derivative at the input clipped to
    ``[-1 + 1e-7, 1 - 1e-7]``: exact zero loss at the identity, finite
    gradients at 0 and pi.
    """

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.arccos(x.clamp(-1.0, 1.0))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        xc = x.double().clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP)
        return (-grad.double() / torch.sqrt(1.0 - xc * xc)).to(x.dtype)


def geodesic_torch(R_pred, R_gt):
    cos = ((R_gt * R_pred).sum(dim=(-1, -2)) - 1.0) / 2.0  # tr(R_gt R_pred^T)
    return _BoundedArccos.apply(cos)


def loss_rot(R_pred, R_gt):
    """Mean geodesic distance between predicted and true rotations."""
    return geodesic_torch(R_pred, R_gt).mean()


def loss_trans(T_pred, T_gt):
    """Mean squared L2 distance over parts."""
    if T_pred.shape != T_gt.shape:
        raise DimensionError(f"translation shapes differ: {tuple(T_pred.shape)} vs {tuple(T_gt.shape)}")
    return ((T_pred - T_gt) ** 2).sum(-1).mean()


def repose(centered, R, T):
    """Centered parts ``(M, n, 3)`` re-posed by per-part ``R`` and ``T``."""
    return centered @ R + T.unsqueeze(-2)


def loss_point(centered, R_pred, T_pred, R_gt, T_gt):
    """Chamfer between the parts re-posed by the predicted and true poses."""
    return chamfer(repose(centered, R_pred, T_pred), repose(centered, R_gt, T_gt)).mean()


def loss_recon(recon, target):
    return chamfer(recon, target).mean()


def sum_by_sample(x, sample_index, num_samples):
    out = torch.zeros(num_samples, *x.shape[1:], dtype=x.dtype, device=x.device)
    return out.index_add(0, sample_index, x)


def loss_embed(H, F_star, sample_index=None, num_samples=1):
    """Mean squared error between the per-object sum of ``H_i`` and ``F*``.

    ``H`` is ``(M, f, 3)``; ``F_star`` is ``(S, f, 3)`` for ``S`` objects.
    """
    if sample_index is None:
        sample_index = torch.zeros(H.shape[0], dtype=torch.long)
    total = sum_by_sample(H, sample_index, num_samples)
    if total.shape != F_star.shape:
        raise DimensionError(f"sum of H has shape {tuple(total.shape)}, target {tuple(F_star.shape)}")
    return ((total - F_star) ** 2).mean()


def loss_gan(scores_fake, scores_real=None, role="generator"):
    """Least-squares adversarial loss.

    generator: ``mean (M(fake) - 1)^2``;
    discriminator: ``mean M(fake)^2 + mean (M(real) - 1)^2``.
    """
    if role == "generator":
        return ((scores_fake - 1.0) ** 2).mean()
    if role == "discriminator":
        if scores_real is None:
            raise ContractError("discriminator loss needs real scores")
        return (scores_fake**2).mean() + ((scores_real - 1.0) ** 2).mean()
    raise ValueError(f"unknown role {role!r}")


@dataclass
class LossWeights:
    rot: float = 1.0
    trans: float = 1.0
    point: float = 10.0
    recon: float = 1.0
    embed: float = 0.1
    adv: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be non-negative")


def total_loss(terms: dict, weights: LossWeights):
    """Weighted sum of the generator-side terms.

    ``terms`` maps ``rot``/``trans``/``point``/``recon``/``embed``/``adv``
    to scalars; missing terms count as zero. The caller passes the generator
    adversarial term here; the discriminator loss is optimised separately.
    """
    LossWeights(**asdict(weights))  # re-validate
    out = 0.0
    for name, value in terms.items():
        w = getattr(weights, name)
        if w:
            out = out + w * value
    if not torch.is_tensor(out):
        out = torch.zeros(())
    return out


# -- metrics -----------------------------------------------------------------


@dataclass
class MetricReport:
    rmse_r: float  # degrees
    gd: float  # radians
    rmse_t: float  # scene units x 1e-2
    pa: float  # fraction
    num_parts: int = 0

    def to_json(self):
        return json.dumps(asdict(self))

    def table(self):
        head = f"{'RMSE(R) deg':>12} {'GD(R) rad':>10} {'RMSE(T) x1e-2':>14} {'PA %':>7}"
        row = f"{self.rmse_r:12.2f} {self.gd:10.3f} {self.rmse_t:14.2f} {100 * self.pa:7.1f}"
        return head + "\n" + row


def pose_metrics(R_pred, R_gt, T_pred, T_gt, part_chamfer, tau=0.01):
    """Metrics from stacked per-part predictions.

    RMSE(R) pools the wrapped per-axis Euler errors of every part; RMSE(T)
    pools translation components and is scaled by 100; a part is placed
    correctly when its chamfer is strictly below ``tau``.
    """
    R_pred, R_gt = np.asarray(R_pred, np.float64), np.asarray(R_gt, np.float64)
    if len(R_pred) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    err = wrap_degrees(euler_from_matrix(R_pred) - euler_from_matrix(R_gt))
    dT = np.asarray(T_pred, np.float64) - np.asarray(T_gt, np.float64)
    return MetricReport(
        rmse_r=float(np.sqrt(np.mean(err**2))),
        gd=float(np.mean(geodesic(R_pred, R_gt))),
        rmse_t=float(100.0 * np.sqrt(np.mean(dT**2))),
        pa=float(np.mean(np.asarray(part_chamfer) < tau)),
        num_parts=len(R_pred),
    )


def merge_reports(reports):
    """Combine shard reports, weighting by part count."""
    total = sum(r.num_parts for r in reports)
    if total == 0:
        raise ContractError("no parts to merge")
    w = [r.num_parts / total for r in reports]
    return MetricReport(
        rmse_r=math.sqrt(sum(wi * r.rmse_r**2 for wi, r in zip(w, reports))),
        gd=sum(wi * r.gd for wi, r in zip(w, reports)),
        rmse_t=math.sqrt(sum(wi * r.rmse_t**2 for wi, r in zip(w, reports))),
        pa=sum(wi * r.pa for wi, r in zip(w, reports)),
        num_parts=total,
    )
