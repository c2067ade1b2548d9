"""Training loop, evaluation runner and checkpoint handling."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import grad
from .config import TrainConfig
from .correlation import AssemblyNet, center
from .data import AssemblySample, write_xyz
from .errors import CheckpointError, ConfigError, ContractError, TrainingError
from .geometry import chamfer, random_rotation_uniform
from .losses import (
    loss_embed,
    loss_gan,
    loss_point,
    loss_recon,
    loss_rot,
    loss_trans,
    pose_metrics,
    repose,
    total_loss,
)
from .vn import Discriminator

TERMS = ("rot", "trans", "point", "recon", "embed", "adv")


@dataclass
class Batch:
    parts: torch.Tensor  # (M, n, 3)
    sample_index: torch.Tensor  # (M,)
    num_samples: int
    R_gt: torch.Tensor  # (M, 3, 3)
    T_gt: torch.Tensor  # (M, 3)
    wholes: list  # per-sample canonical clouds (m, 3)


def _take(points: np.ndarray, n: int) -> np.ndarray:
    # stored parts are resampled in random order, so a prefix is a uniform subsample
    if len(points) < n:
        raise ConfigError(f"dataset parts have {len(points)} points, model needs n={n}")
    return points[:n]


def collate(samples: Sequence[AssemblySample], n: int, dtype=torch.float32) -> Batch:
    parts, index, R, T = [], [], [], []
    for s_idx, s in enumerate(samples):
        for p, rot, tr in zip(s.parts, s.rotations, s.translations):
            parts.append(_take(p, n))
            index.append(s_idx)
            R.append(rot)
            T.append(tr)
    return Batch(
        parts=torch.as_tensor(np.stack(parts), dtype=dtype),
        sample_index=torch.as_tensor(index, dtype=torch.long),
        num_samples=len(samples),
        R_gt=torch.as_tensor(np.stack(R), dtype=dtype),
        T_gt=torch.as_tensor(np.stack(T), dtype=dtype),
        wholes=[torch.as_tensor(s.canonical_whole, dtype=dtype) for s in samples],
    )


def augment(batch: Batch, rng: np.random.Generator) -> Batch:
    """Spin every part about its own centroid by a fresh uniform rotation.

    The labels follow: with ``P' = (P - c) A + c`` the target rotation
    becomes ``A^T R``, the canonical centroid is unchanged.
    """
    A = torch.as_tensor(random_rotation_uniform(rng, len(batch.parts)), dtype=batch.parts.dtype)
    c = batch.parts.mean(dim=1, keepdim=True)
    batch.parts = (batch.parts - c) @ A + c
    batch.R_gt = A.transpose(-1, -2) @ batch.R_gt
    return batch


def subsample(points: torch.Tensor, m: int) -> torch.Tensor:
    """Evenly strided subsample (or cyclic repeat) to exactly ``m`` points."""
    idx = torch.div(torch.arange(m) * points.shape[0], m, rounding_mode="floor")
    return points[idx]


def composites(reposed: torch.Tensor, batch: Batch, m: int) -> torch.Tensor:
    """Per object: concatenated re-posed parts, subsampled to ``m`` and centered."""
    out = []
    for s in range(batch.num_samples):
        pts = reposed[batch.sample_index == s].reshape(-1, 3)
        out.append(center(subsample(pts, m))[0])
    return torch.stack(out)


def real_wholes(batch: Batch, m: int) -> torch.Tensor:
    return torch.stack([center(subsample(w, m))[0] for w in batch.wholes])


def generator_terms(model: AssemblyNet, disc: Discriminator | None, batch: Batch, weights, disc_points: int):
    out = model(batch.parts, batch.sample_index, batch.num_samples)
    gt_posed = repose(out["centered"], batch.R_gt, batch.T_gt)
    terms = {
        "rot": loss_rot(out["R"], batch.R_gt),
        "trans": loss_trans(out["T"], batch.T_gt),
        "point": loss_point(out["centered"], out["R"], out["T"], batch.R_gt, batch.T_gt),
        "recon": loss_recon(out["recon"], gt_posed),
    }
    if weights.embed:
        n = batch.parts.shape[1]
        with torch.no_grad():
            # target only: the whole-object feature is not optimised through
            wholes = torch.stack([center(subsample(w, n))[0] for w in batch.wholes])
            F_star = model.encode(wholes)[0]
        terms["embed"] = loss_embed(out["H"], F_star, batch.sample_index, batch.num_samples)
    if weights.adv and disc is not None:
        fake = composites(repose(out["centered"], out["R"], out["T"]), batch, disc_points)
        terms["adv"] = loss_gan(disc(fake), role="generator")
    return terms, out


def discriminator_loss(disc: Discriminator, out: dict, batch: Batch, disc_points: int):
    with torch.no_grad():
        fake = composites(repose(out["centered"], out["R"], out["T"]), batch, disc_points)
    real = real_wholes(batch, disc_points)
    return loss_gan(disc(fake), disc(real), role="discriminator")


class Trainer:
    """Holds the networks and both Adam states for one training run."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.model = AssemblyNet(cfg.model_config())
        self.disc = Discriminator()
        self.weights = cfg.loss_weights()
        self.g_names, self.g_params = zip(*self.model.named_parameters())
        self.d_names, self.d_params = zip(*self.disc.named_parameters())
        self.opt_g = grad.OptimizerState(learning_rate=cfg.learning_rate)
        self.opt_d = grad.OptimizerState(learning_rate=cfg.learning_rate)
        self.epoch = 0

    # -- checkpoints ---------------------------------------------------------

    def state_tensors(self) -> dict:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"disc.{k}": v for k, v in self.disc.state_dict().items()})
        tensors.update(grad.optimizer_tensors("opt_g", self.g_names, self.opt_g))
        tensors.update(grad.optimizer_tensors("opt_d", self.d_names, self.opt_d))
        tensors["meta.epoch"] = torch.tensor([float(self.epoch)])
        return tensors

    def save(self, path):
        grad.save_checkpoint(path, self.state_tensors())

    def load(self, path):
        tensors = grad.load_checkpoint(path)
        load_weights(self.model, tensors, "model.")
        load_weights(self.disc, tensors, "disc.", strict=False)
        grad.restore_optimizer("opt_g", self.g_names, tensors, self.opt_g)
        grad.restore_optimizer("opt_d", self.d_names, tensors, self.opt_d)
        self.epoch = int(tensors.get("meta.epoch", torch.zeros(1)).item())

    # -- optimisation --------------------------------------------------------

    def step(self, batch: Batch) -> dict:
        cfg, w = self.cfg, self.weights
        terms, out = generator_terms(self.model, self.disc, batch, w, cfg.disc_points)
        total = total_loss(terms, w)
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite generator loss at epoch {self.epoch + 1}: {total.item()}")
        grads = grad.backward(total, self.g_params)
        grad.adam_step(self.g_params, grads, self.opt_g)
        record = {k: v.item() for k, v in terms.items()}
        record["total"] = total.item()
        if w.adv:
            for _ in range(cfg.d_steps):
                d_loss = discriminator_loss(self.disc, out, batch, cfg.disc_points)
                if not torch.isfinite(d_loss):
                    raise TrainingError(f"non-finite discriminator loss at epoch {self.epoch + 1}")
                grad.adam_step(self.d_params, grad.backward(d_loss, self.d_params), self.opt_d)
            record["disc"] = d_loss.item()
        return record

    def run_epoch(self, samples: Sequence[AssemblySample]) -> dict:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, self.epoch])
        order = rng.permutation(len(samples))
        sums: dict[str, float] = {}
        batches = 0
        self.model.train()
        for start in range(0, len(order), cfg.batch_size):
            batch = collate([samples[i] for i in order[start : start + cfg.batch_size]], cfg.n)
            if cfg.augment_rotations:
                batch = augment(batch, rng)
            for k, v in self.step(batch).items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        self.epoch += 1
        return {k: v / batches for k, v in sums.items()}


def load_weights(module: torch.nn.Module, tensors: dict, prefix: str, strict: bool = True):
    """Copy ``prefix``-named checkpoint tensors into ``module``.

    Raises ``CheckpointError`` listing every missing or mis-shaped parameter.
    """
    expected = module.state_dict()
    found = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
    if not found and not strict:
        return
    problems = []
    for name, ref in expected.items():
        if name not in found:
            problems.append(f"{name}: expected {tuple(ref.shape)}, found nothing")
        elif tuple(found[name].shape) != tuple(ref.shape):
            problems.append(f"{name}: expected {tuple(ref.shape)}, found {tuple(found[name].shape)}")
    for name in sorted(set(found) - set(expected)):
        problems.append(f"{name}: unexpected parameter with shape {tuple(found[name].shape)}")
    if problems:
        raise CheckpointError("checkpoint does not match the configured architecture:\n  " + "\n  ".join(problems))
    module.load_state_dict({k: found[k].to(ref.dtype) for k, ref in expected.items()})


def json_logger(stream=None, path=None) -> Callable[[dict], None]:
    fh = open(path, "a", encoding="utf-8") if path else None

    def log(record: dict):
        line = json.dumps(record, sort_keys=True)
        if stream is not None:
            print(line, file=stream, flush=True)
        if fh is not None:
            fh.write(line + "\n")
            fh.flush()

    return log


def train(cfg: TrainConfig, samples: Sequence[AssemblySample], log=None, eval_samples=None) -> tuple[Trainer, list[dict]]:
    """Train for ``cfg.epochs`` epochs; returns the trainer and per-epoch records.

    Checkpoints go to ``cfg.out_dir/last.eqas`` every ``checkpoint_interval``
    epochs. With ``cfg.resume`` an existing checkpoint there is picked up.
    """
    log = log or (lambda record: None)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "last.eqas"
    trainer = Trainer(cfg)
    if cfg.resume and ckpt.exists():
        trainer.load(ckpt)
        log({"event": "resume", "epoch": trainer.epoch})
    history = []
    while trainer.epoch < cfg.epochs:
        t0 = time.perf_counter()
        record = trainer.run_epoch(samples)
        record.update(event="epoch", epoch=trainer.epoch, seconds=time.perf_counter() - t0)
        if eval_samples is not None and cfg.eval_interval and trainer.epoch % cfg.eval_interval == 0:
            report, _ = evaluate(trainer.model, eval_samples, cfg.tau, cfg.batch_size)
            record["eval"] = json.loads(report.to_json())
        history.append(record)
        log(record)
        if trainer.epoch % cfg.checkpoint_interval == 0 or trainer.epoch == cfg.epochs:
            trainer.save(ckpt)
    return trainer, history


@dataclass
class Predictions:
    R_pred: np.ndarray
    T_pred: np.ndarray
    R_gt: np.ndarray
    T_gt: np.ndarray
    chamfer: np.ndarray
    sample_index: np.ndarray
    reposed: list = field(default_factory=list)


@torch.no_grad()
def predict(model: AssemblyNet, samples: Sequence[AssemblySample], batch_size: int = 8, oracle: bool = False, keep_points: bool = False) -> Predictions:
    """Run ``model`` over ``samples``.

    ``oracle=True`` replaces the predicted poses with the ground truth; used
    to sanity-check the metric pipeline.
    """
    if len(samples) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    model.eval()
    n = model.cfg.n
    dtype = next(model.parameters()).dtype
    acc = {k: [] for k in ("R_pred", "T_pred", "R_gt", "T_gt", "chamfer", "sample_index")}
    reposed_all = []
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start : start + batch_size], n, dtype)
        if oracle:
            centered, _ = center(batch.parts)
            R, T = batch.R_gt, batch.T_gt
        else:
            out = model(batch.parts, batch.sample_index, batch.num_samples)
            centered, R, T = out["centered"], out["R"], out["T"]
        pred = repose(centered, R, T)
        gt = repose(centered, batch.R_gt, batch.T_gt)
        acc["R_pred"].append(R.double().numpy())
        acc["T_pred"].append(T.double().numpy())
        acc["R_gt"].append(batch.R_gt.double().numpy())
        acc["T_gt"].append(batch.T_gt.double().numpy())
        acc["chamfer"].append(chamfer(pred, gt).double().numpy())
        acc["sample_index"].append(batch.sample_index.numpy() + start)
        if keep_points:
            reposed_all.extend(pred.numpy())
    return Predictions(**{k: np.concatenate(v) for k, v in acc.items()}, reposed=reposed_all)


def evaluate(model: AssemblyNet, samples: Sequence[AssemblySample], tau: float = 0.01, batch_size: int = 8, oracle: bool = False):
    preds = predict(model, samples, batch_size, oracle)
    report = pose_metrics(preds.R_pred, preds.R_gt, preds.T_pred, preds.T_gt, preds.chamfer, tau)
    return report, preds


def export_assemblies(preds: Predictions, directory) -> list[Path]:
    """Write each predicted assembly as ``assembly_<i>.xyz``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in np.unique(preds.sample_index):
        pts = np.concatenate([preds.reposed[i] for i in np.flatnonzero(preds.sample_index == s)])
        path = d / f"assembly_{int(s):06d}.xyz"
        write_xyz(path, pts)
        paths.append(path)
    return paths


def load_model(cfg: TrainConfig, checkpoint) -> AssemblyNet:
    model = AssemblyNet(cfg.model_config())
    load_weights(model, grad.load_checkpoint(checkpoint), "model.")
    return model
