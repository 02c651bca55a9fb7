"""Pretraining loops: PGD-adversarial and free-adversarial, multi-crop and pair.

Schemes
-------
empssl_pgd   multi-crop objective, k-step PGD per batch, one update per batch
simclr_pgd   NT-Xent over (clean view, attacked view) pairs, k-step PGD
empssl_free  multi-crop objective with minibatch replays: each replay takes
             one backward pass that updates both the persistent perturbation
             and the weights; total epochs divide by the replay count
simclr_free  the pair scheme under the same replay mechanics

Accounting identity: every scheme performs total_epochs * batches_per_epoch
optimizer steps; free schemes run total_epochs/replays outer epochs with
``replays`` updates per batch visit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, PerturbationBuffer, pgd, ssl_attack_objective
from .augment import AugmentSpec, sample_views
from .data import ImageBatch
from .errors import ConfigError, NonFiniteLoss
from .losses import TcrConfig, empssl_terms, nt_xent, total_coding_rate
from .models import Encoder, EncoderSpec, save_params
from .optim import make_optimizer, optimizer_step
from .seeding import derive, generator

SCHEMES = ("empssl_pgd", "simclr_pgd", "empssl_free", "simclr_free")
METRIC_COLUMNS = ("epoch", "scheme", "loss_mean", "tcr_mean",
                  "invariance_mean", "effective_rank")


@dataclass(frozen=True)
class TrainConfig:
    scheme: str
    total_epochs: int
    replays: int
    crops: int
    batch_size: int
    attack: AttackConfig
    loss: TcrConfig
    encoder: EncoderSpec
    augment: AugmentSpec
    seed: int
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    objective_mode: str = "full"  # or "invariance_only"
    share_delta: bool = False
    simclr_clean_pair: bool = False
    rank_probe: int = 128

    def validate(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.total_epochs < 1 or self.batch_size < 2:
            raise ConfigError("need total_epochs >= 1 and batch_size >= 2")
        if self.is_free:
            if self.replays < 1:
                raise ConfigError("free schemes need replays >= 1")
            if self.total_epochs % self.replays != 0:
                raise ConfigError(
                    f"replays ({self.replays}) must divide total_epochs ({self.total_epochs})")
        elif self.replays != 1:
            raise ConfigError("pgd schemes fix replays = 1")
        if self.is_simclr:
            if self.crops != 2 or self.augment.effective_count() != 2:
                raise ConfigError("simclr schemes use exactly 2 views")
        elif self.crops != self.augment.effective_count():
            raise ConfigError(
                f"crops ({self.crops}) disagrees with augment slot count "
                f"({self.augment.effective_count()})")
        if self.objective_mode not in ("full", "invariance_only"):
            raise ConfigError(f"unknown objective_mode {self.objective_mode!r}")

    @property
    def is_free(self) -> bool:
        return self.scheme.endswith("_free")

    @property
    def is_simclr(self) -> bool:
        return self.scheme.startswith("simclr")

    @property
    def outer_epochs(self) -> int:
        return self.total_epochs // self.replays if self.is_free else self.total_epochs

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "total_epochs": self.total_epochs,
            "replays": self.replays,
            "crops": self.crops,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "lr": self.lr,
            "momentum": self.momentum,
            "betas": list(self.betas),
            "objective_mode": self.objective_mode,
            "share_delta": self.share_delta,
            "simclr_clean_pair": self.simclr_clean_pair,
            "rank_probe": self.rank_probe,
            "seed": self.seed,
            "attack": {
                "epsilon": self.attack.epsilon,
                "steps": self.attack.steps,
                "alpha": self.attack.alpha,
                "objective": self.attack.objective,
                "random_start": self.attack.random_start,
            },
            "loss": {"eps_sq": self.loss.eps_sq, "lam": self.loss.lam,
                     "tau": self.loss.tau},
            "encoder": {"input_dim": self.encoder.input_dim,
                        "hidden": list(self.encoder.hidden),
                        "activation": self.encoder.activation,
                        "embed_dim": self.encoder.embed_dim},
            "augment": {"mode": self.augment.mode,
                        "scales": list(self.augment.scales),
                        "ratios": list(self.augment.ratios),
                        "crop_count": self.augment.crop_count,
                        "out_size": list(self.augment.out_size),
                        "jitter": None if self.augment.jitter is None else {
                            "scale_range": list(self.augment.jitter.scale_range),
                            "shift_range": list(self.augment.jitter.shift_range)}},
        }


@dataclass
class RunManifest:
    """Provenance record for one pretraining run; written before training
    starts and finalized afterwards."""

    run_id: str
    config: dict
    config_hash: str
    status: str = "running"
    started_at: str = ""
    ended_at: str = ""
    metrics_path: str = ""
    weights_path: str = ""
    outer_epochs: int = 0
    optimizer_steps: int = 0
    delta_updates: int = 0
    attack_grad_evals: int = 0
    epoch_seconds: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def write(self, path: str | Path):
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")


def _config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def new_run_id(cfg: TrainConfig) -> str:
    return f"{cfg.scheme}-s{cfg.seed}-{uuid.uuid4().hex[:8]}"


def _effective_rank_of(encoder: Encoder, probe: ImageBatch) -> float:
    from .evaluation import effective_rank  # local import avoids a module cycle
    z = encoder.embed_pixels(probe.pixels)
    return effective_rank(z)


class _EpochStats:
    def __init__(self):
        self.loss, self.tcr, self.inv, self.count = 0.0, 0.0, 0.0, 0

    def add(self, loss, tcr, inv):
        self.loss += loss
        self.tcr += tcr
        self.inv += inv
        self.count += 1

    def row(self, epoch: int, scheme: str, rank: float) -> list:
        c = max(self.count, 1)
        return [epoch, scheme, repr(self.loss / c), repr(self.tcr / c),
                repr(self.inv / c), repr(rank)]


def _diag_values(z_values: list[np.ndarray], cfg: TcrConfig) -> tuple[float, float]:
    """Mean coding rate and mean alignment of already-computed embeddings."""
    zbar = np.mean(z_values, axis=0)
    rates = [total_coding_rate(z, cfg).item() for z in z_values]
    aligns = [float((z * zbar).sum()) for z in z_values]
    return float(np.mean(rates)), float(np.mean(aligns))


def _empssl_train_step(encoder, view_cols, cfg: TrainConfig):
    """One backward pass of the multi-crop loss; returns stats and gradients."""
    params = encoder.param_nodes(trainable=True)
    leaves = [ad.leaf(v) for v in view_cols]
    zs = [encoder.embed(x, params=params)[0] for x in leaves]
    include_tcr = cfg.objective_mode == "full"
    loss, rates, aligns = empssl_terms(zs, cfg.loss, include_tcr=include_tcr)
    grads = ad.backward(loss, leaves=leaves + list(params.values()))
    pixel_grads = [grads[x] for x in leaves]
    param_grads = {k: grads[v] for k, v in params.items()}
    tcr_mean = float(np.mean([r.item() for r in rates])) if rates else 0.0
    inv_mean = float(np.mean([a.item() for a in aligns]))
    return loss.item(), tcr_mean, inv_mean, pixel_grads, param_grads


def _simclr_train_step(encoder, clean_cols, adv_cols, cfg: TrainConfig):
    """One backward pass of NT-Xent on (clean, adversarial) positives."""
    params = encoder.param_nodes(trainable=True)
    adv_leaf = ad.leaf(adv_cols)
    z_clean = encoder.embed(ad.constant(clean_cols), params=params)[0]
    z_adv = encoder.embed(adv_leaf, params=params)[0]
    loss = nt_xent(z_clean, z_adv, cfg.loss.tau)
    grads = ad.backward(loss, leaves=[adv_leaf] + list(params.values()))
    param_grads = {k: grads[v] for k, v in params.items()}
    tcr_mean, inv_mean = _diag_values([z_clean.value, z_adv.value], cfg.loss)
    return loss.item(), tcr_mean, inv_mean, grads[adv_leaf], param_grads


def pretrain(data: ImageBatch, cfg: TrainConfig, out_dir: str | Path,
             holdout: ImageBatch | None = None,
             run_id: str | None = None) -> tuple[Encoder, RunManifest]:
    """Run one pretraining scheme end to end.

    Writes manifest.json, metrics.csv and weights.rssl1 under ``out_dir``.
    The metrics file is a deterministic function of (config, seed); timings
    live in the manifest. A non-finite loss aborts with the manifest marked
    failed.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if (out_dir / "manifest.json").exists():
        raise ConfigError(
            f"{out_dir} already holds a manifest; reruns are new runs and "
            f"need a fresh output directory")
    rid = run_id or new_run_id(cfg)
    manifest = RunManifest(run_id=rid, config=cfg.to_dict(), config_hash=_config_hash(cfg))
    manifest.metrics_path = str(out_dir / "metrics.csv")
    manifest.weights_path = str(out_dir / "weights.rssl1")
    manifest.started_at = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest_path = out_dir / "manifest.json"
    manifest.write(manifest_path)

    n = data.n
    batches = n // cfg.batch_size
    if batches < 1:
        raise ConfigError("batch_size exceeds the dataset")
    encoder = Encoder.initialized(cfg.encoder, cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.betas)

    view_pixels = cfg.augment.out_size[0] * cfg.augment.out_size[1] * data.shape[2]
    if cfg.encoder.input_dim != view_pixels:
        raise ConfigError(
            f"encoder input_dim {cfg.encoder.input_dim} != view pixels {view_pixels}")

    buf = None
    if cfg.is_free:
        slots = 1 if (cfg.is_simclr or cfg.share_delta) else cfg.crops
        buf = PerturbationBuffer(n, slots, view_pixels, cfg.attack.epsilon)

    rank_probe = holdout if holdout is not None else data.take(
        np.arange(min(cfg.rank_probe, n)))
    rank_probe = rank_probe.take(np.arange(min(cfg.rank_probe, rank_probe.n)))

    rows = []
    attack_evals = 0
    t_start = time.perf_counter()
    try:
        for outer in range(cfg.outer_epochs):
            t_epoch = time.perf_counter()
            stats = _EpochStats()
            order = generator(cfg.seed, "order", outer).permutation(n)
            for b in range(batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = data.take(idx)
                aug_seed = derive(cfg.seed, "aug", outer, b)
                views = sample_views(batch, cfg.augment, aug_seed)
                view_cols = [v.flat_columns() for v in views]
                if cfg.is_free:
                    loss_val = _free_batch(encoder, view_cols, idx, buf, opt, cfg, stats)
                else:
                    loss_val, evals = _pgd_batch(encoder, view_cols, opt, cfg,
                                                 stats, outer, b)
                    attack_evals += evals
                if not np.isfinite(loss_val):
                    raise NonFiniteLoss(f"loss became {loss_val} at epoch {outer} batch {b}")
            if buf is not None and buf.max_abs() > cfg.attack.epsilon + 1e-12:
                raise AssertionError("perturbation buffer left the epsilon ball")
            rank = _effective_rank_of(encoder, rank_probe)
            rows.append(stats.row(outer, cfg.scheme, rank))
            manifest.epoch_seconds.append(round(time.perf_counter() - t_epoch, 6))
    except NonFiniteLoss:
        manifest.status = "failed"
        manifest.ended_at = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        manifest.wall_seconds = time.perf_counter() - t_start
        manifest.write(manifest_path)
        raise

    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(rows)
    save_params(encoder.store, out_dir / "weights.rssl1")

    manifest.status = "done"
    manifest.ended_at = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    manifest.wall_seconds = time.perf_counter() - t_start
    manifest.outer_epochs = cfg.outer_epochs
    manifest.optimizer_steps = encoder.store.step_count
    manifest.delta_updates = buf.update_count if buf is not None else 0
    manifest.attack_grad_evals = attack_evals
    manifest.write(manifest_path)
    return encoder, manifest


def _pgd_batch(encoder, view_cols, opt, cfg: TrainConfig, stats, outer, b):
    """k-step attack on the scheme's SSL objective, then one optimizer step."""
    include_tcr = cfg.objective_mode == "full"
    attack_seed = derive(cfg.seed, "attack", outer, b)
    evals = 0
    if cfg.is_simclr:
        clean, target = view_cols
        fn = ssl_attack_objective(encoder, "simclr", cfg.loss, clean_cols=clean)
        if cfg.attack.epsilon > 0:
            delta = pgd(fn, target, cfg.attack, seed=attack_seed)
            evals = cfg.attack.steps
            target = np.clip(target + delta, 0.0, 1.0)
        loss_val, tcr_mean, inv_mean, _, param_grads = _simclr_train_step(
            encoder, clean, target, cfg)
    else:
        x = np.stack(view_cols)
        fn = ssl_attack_objective(encoder, "empssl", cfg.loss,
                                  crops=cfg.crops, include_tcr=include_tcr)
        if cfg.attack.epsilon > 0:
            delta = pgd(fn, x, cfg.attack, seed=attack_seed)
            evals = cfg.attack.steps
            x = np.clip(x + delta, 0.0, 1.0)
        loss_val, tcr_mean, inv_mean, _, param_grads = _empssl_train_step(
            encoder, list(x), cfg)
    optimizer_step(encoder.store, param_grads, opt)
    stats.add(loss_val, tcr_mean, inv_mean)
    return loss_val, evals


def _free_batch(encoder, view_cols, idx, buf: PerturbationBuffer, opt,
                cfg: TrainConfig, stats):
    """m replays; each uses one backward pass for both delta and weights."""
    loss_val = 0.0
    for _ in range(cfg.replays):
        deltas = buf.slices(idx)  # (nb, slots, P)
        if cfg.is_simclr:
            clean, target = view_cols
            adv = np.clip(target + deltas[:, 0, :].T, 0.0, 1.0)
            loss_val, tcr_mean, inv_mean, pixel_grad, param_grads = \
                _simclr_train_step(encoder, clean, adv, cfg)
            buf.free_step(idx, pixel_grad.T[:, None, :])
        else:
            if buf.delta.shape[1] == 1:  # shared perturbation across crops
                adv = [np.clip(v + deltas[:, 0, :].T, 0.0, 1.0) for v in view_cols]
            else:
                adv = [np.clip(v + deltas[:, i, :].T, 0.0, 1.0)
                       for i, v in enumerate(view_cols)]
            loss_val, tcr_mean, inv_mean, pixel_grads, param_grads = \
                _empssl_train_step(encoder, adv, cfg)
            if buf.delta.shape[1] == 1:
                summed = np.sum([g.T for g in pixel_grads], axis=0)
                buf.free_step(idx, summed[:, None, :])
            else:
                buf.free_step(idx, np.stack([g.T for g in pixel_grads], axis=1))
        optimizer_step(encoder.store, param_grads, opt)
        stats.add(loss_val, tcr_mean, inv_mean)
    return loss_val
