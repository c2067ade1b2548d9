"""Sampled-rotation property suite for the encoder and correlation module.

For random part sets and random rotations it measures, as relative
Frobenius errors, how far the network is from the symmetries it is built to
have:

* ``F`` equivariance:  F(P R) = F(P) R
* ``G`` invariance:    G(P R) = G(P)
* ``C_ij`` in ``i``:   G_j F(P_i R) = C_ij R
* ``C_ij`` in ``j``:   G(P_j R) F_i = C_ij
* ``H_i`` in ``i``:    rotating part i rotates H_i
* ``H_i`` in ``j``:    rotating any other part leaves H_i alone
* translation:         shifting a part leaves F unchanged (parts are centered)
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .correlation import AssemblyNet, center, part_correlation
from .data import DataConfig, generate_sample
from .geometry import random_rotation_uniform

PROPERTIES = (
    "F_equivariance",
    "G_invariance",
    "C_equivariant_in_i",
    "C_invariant_in_j",
    "H_equivariant_in_i",
    "H_invariant_in_j",
    "translation_invariance",
)


def relative_error(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``|a - b| / |b|`` over the last two axes."""
    diff = (a - b).double().flatten(-2).norm(dim=-1)
    ref = b.double().flatten(-2).norm(dim=-1).clamp_min(1e-12)
    return diff / ref


@dataclass
class PropertyResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


@dataclass
class EquivarianceReport:
    results: list[PropertyResult] = field(default_factory=list)
    rotations: int = 0
    part_sets: int = 0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_error(self) -> float:
        return max(r.max_error for r in self.results)

    def records(self):
        return [
            {"event": "equivariance", "property": r.name, "max_rel_error": r.max_error, "tolerance": r.tolerance, "passed": r.passed}
            for r in self.results
        ]

    def table(self) -> str:
        lines = [f"{'property':<24} {'max rel. error':>14} {'tol':>8}  result"]
        for r in self.results:
            lines.append(f"{r.name:<24} {r.max_error:14.3e} {r.tolerance:8.0e}  {'PASS' if r.passed else 'FAIL'}")
        lines.append(f"{self.part_sets} part sets x {self.rotations} rotations: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(self.records())


def random_part_sets(num_sets: int, n: int, seed: int = 0, max_parts: int = 3) -> list[list[np.ndarray]]:
    """Fractured parts from the procedural generator, ``n`` points each."""
    cfg = DataConfig(
        num_samples=num_sets,
        seed=seed,
        min_parts=2,
        max_parts=max_parts,
        shapes=("sphere", "box", "cylinder", "ellipsoid"),
        part_points=n,
        min_part_points=32,
        cut_axis=None,
    )
    return [generate_sample(cfg, i).parts for i in range(num_sets)]


@torch.no_grad()
def check_equivariance(
    model: AssemblyNet,
    rotations: int = 100,
    part_sets: int = 10,
    tolerance: float = 1e-4,
    seed: int = 0,
    chunk: int = 10,
    dtype: torch.dtype | str | None = torch.float64,
) -> EquivarianceReport:
    """Run the property suite on ``model`` and return the max error per property.

    The weights are copied to ``dtype`` first (``None`` keeps the model's own).
    In float32, a kNN neighbour or learned-max winner can flip between a part
    and its rotated copy when two candidates are within rounding of each
    other; float64 makes such near-ties vanishingly rare.
    """
    if isinstance(dtype, str):
        dtype = getattr(torch, dtype)
    if dtype is not None and dtype != next(model.parameters()).dtype:
        model = copy.deepcopy(model).to(dtype)
    model.eval()
    dtype = next(model.parameters()).dtype
    rng = np.random.default_rng([seed, 1])
    worst = dict.fromkeys(PROPERTIES, 0.0)

    def record(name, err):
        worst[name] = max(worst[name], float(err.max()))

    for parts in random_part_sets(part_sets, model.cfg.n, seed):
        P = center(torch.as_tensor(np.stack(parts), dtype=dtype))[0]  # (N, n, 3)
        N = len(P)
        F, G = model.encode(P)
        one = torch.zeros(N, dtype=torch.long)
        H = model.correlate(F, G, one, 1)

        shift = torch.as_tensor(rng.uniform(-1, 1, (N, 1, 3)), dtype=dtype)
        F_shift, _ = model.encode(center(P + shift)[0])
        record("translation_invariance", relative_error(F_shift, F))

        for start in range(0, rotations, chunk):
            R = torch.as_tensor(random_rotation_uniform(rng, min(chunk, rotations - start)), dtype=dtype)
            r = len(R)
            # every part under every rotation: (r, N, n, 3)
            PR = P.unsqueeze(0) @ R.unsqueeze(1)
            FR, GR = (t.view(r, N, *t.shape[1:]) for t in model.encode(PR.reshape(r * N, -1, 3)))
            Rb = R.unsqueeze(1)
            record("F_equivariance", relative_error(FR, F @ Rb))
            record("G_invariance", relative_error(GR, G.expand_as(GR)))
            for i in range(N):
                for j in range(N):
                    if i == j:
                        continue
                    C = part_correlation(G[j], F[i])
                    record("C_equivariant_in_i", relative_error(part_correlation(G[j], FR[:, i]), C @ R))
                    record("C_invariant_in_j", relative_error(part_correlation(GR[:, j], F[i]), C.expand(r, -1, -1)))
                # the whole set with only part i rotated, through the model's own correlate()
                Fi = F.repeat(r, 1, 1).view(r, N, *F.shape[1:]).clone()
                Gi = G.repeat(r, 1, 1).view(r, N, *G.shape[1:]).clone()
                Fi[:, i], Gi[:, i] = FR[:, i], GR[:, i]
                index = torch.arange(r).repeat_interleave(N)
                Hi = model.correlate(Fi.flatten(0, 1), Gi.flatten(0, 1), index, r).view(r, N, *H.shape[1:])
                record("H_equivariant_in_i", relative_error(Hi[:, i], H[i] @ R))
                others = [k for k in range(N) if k != i]
                record("H_invariant_in_j", relative_error(Hi[:, others], H[others].expand(r, -1, -1, -1)))

    results = [PropertyResult(name, worst[name], tolerance) for name in PROPERTIES]
    return EquivarianceReport(results, rotations, part_sets)
