"""Probing protocols and robust/clean accuracy under end-to-end PGD.

Protocols: ``central`` feeds one whole-image view to the linear head;
``aggregate`` averages n seeded crop embeddings (re-normalized) per image.
Robust linear evaluation (r-LE) trains the head on attacked inputs with
gradients flowing through the frozen encoder. Evaluation attacks always go
end to end from pixels using cross entropy; in the aggregate protocol the
perturbation lives on the source image and the gradient passes through the
recorded crop-resize maps (a per-view mode is also available).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd
from .augment import AugmentSpec, central_spec, eval_spec, sample_views
from .data import ImageBatch
from .errors import ConfigError, LabelMismatch, ZeroMatrix
from .models import Encoder, LinearHead, cross_entropy
from .optim import make_optimizer, optimizer_step
from .parallel import map_chunks
from .seeding import derive, generator

REPORT_COLUMNS = ("run_id", "protocol", "n", "robust_probe", "epsilon_num",
                  "epsilon_den", "clean_acc", "robust_acc", "attack_steps", "seed")

EVAL_ATTACK_STEPS = 20


@dataclass(frozen=True)
class ProbeConfig:
    protocol: str = "central"  # or "aggregate"
    n: int = 1
    robust: bool = False
    epochs: int = 20
    batch_size: int = 100
    optimizer: str = "adam"
    lr: float = 0.01
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    attack: AttackConfig = AttackConfig(epsilon=8 / 255, steps=5,
                                        objective="cross_entropy")
    seed: int = 0

    def validate(self):
        if self.protocol not in ("central", "aggregate"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.n < 1:
            raise ConfigError("aggregation needs n >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "n": self.n, "robust": self.robust,
                "epochs": self.epochs, "batch_size": self.batch_size,
                "optimizer": self.optimizer, "lr": self.lr,
                "momentum": self.momentum, "betas": list(self.betas),
                "attack": {"epsilon": self.attack.epsilon, "steps": self.attack.steps,
                           "alpha": self.attack.alpha,
                           "objective": self.attack.objective,
                           "random_start": self.attack.random_start},
                "seed": self.seed}


def effective_rank(z: np.ndarray) -> float:
    """exp(entropy) of the normalized singular values: 1 at collapse,
    min(d, b) for an isotropic spectrum."""
    z = np.asarray(z, dtype=np.float64)
    if not z.any():
        raise ZeroMatrix("effective rank undefined for the zero matrix")
    sv = np.linalg.svd(z, compute_uv=False)
    p = sv / sv.sum()
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def _renormalize(z: np.ndarray, guard: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(z, axis=0, keepdims=True)
    out = z / np.where(norms < guard, 1.0, norms)
    degenerate = norms[0] < guard
    if degenerate.any():
        out[:, degenerate] = 0.0
        out[0, degenerate] = 1.0
    return out


def aggregate_embedding(encoder: Encoder, img: ImageBatch, n: int,
                        spec: AugmentSpec, seed: int) -> np.ndarray:
    """Mean of n seeded view embeddings per image, re-normalized to unit norm.

    n = 1 short-circuits to the single view embedding so the central
    protocol is reproduced bit for bit.
    """
    views = sample_views(img, eval_spec(spec, n), seed)
    if len(views) == 1:
        return encoder.embed_pixels(views[0].pixels)
    z = np.mean([encoder.embed_pixels(v.pixels) for v in views], axis=0)
    return _renormalize(z)


def probe_features(encoder: Encoder, img: ImageBatch, cfg: ProbeConfig,
                   spec: AugmentSpec) -> np.ndarray:
    if cfg.protocol == "central":
        views = sample_views(img, central_spec(spec), 0)
        return encoder.embed_pixels(views[0].pixels)
    return aggregate_embedding(encoder, img, cfg.n, spec,
                               derive(cfg.seed, "probe-views"))


def _probe_views(img: ImageBatch, cfg: ProbeConfig, spec: AugmentSpec):
    """The fixed views a probe/evaluation works on, with gather tables."""
    if cfg.protocol == "central":
        return sample_views(img, central_spec(spec), 0)
    return sample_views(img, eval_spec(spec, cfg.n), derive(cfg.seed, "probe-views"))


def _pipeline_loss_and_grad(encoder: Encoder, head: LinearHead,
                            labels: np.ndarray, view_tables, channels: int):
    """Cross entropy of the (possibly aggregated) pipeline as a function of
    source pixels, differentiated end to end."""

    def fn(x_cols: np.ndarray):
        x = ad.leaf(x_cols)
        zs = []
        for idx, wts in view_tables:
            v = ad.column_gather(x, idx, wts)
            zs.append(encoder.embed(v)[0])
        z = zs[0] if len(zs) == 1 else ad.normalize_cols(
            ad.scale(sum(zs[1:], start=zs[0]), 1.0 / len(zs)))
        logits, _ = head.logits(z)
        loss = cross_entropy(logits, labels)
        grads = ad.backward(loss, leaves=[x])
        return loss.item(), grads[x]

    return fn


def _view_loss_and_grad(encoder: Encoder, head: LinearHead, labels: np.ndarray):
    """Cross entropy as a function of stacked view pixels (V, P, n); each
    view is perturbed independently and embeddings are aggregated."""

    def fn(stacked: np.ndarray):
        leaves = [ad.leaf(v) for v in stacked]
        zs = [encoder.embed(x)[0] for x in leaves]
        z = zs[0] if len(zs) == 1 else ad.normalize_cols(
            ad.scale(sum(zs[1:], start=zs[0]), 1.0 / len(zs)))
        logits, _ = head.logits(z)
        loss = cross_entropy(logits, labels)
        grads = ad.backward(loss, leaves=leaves)
        return loss.item(), np.stack([grads[x] for x in leaves])

    return fn


def train_probe(encoder: Encoder, data: ImageBatch, cfg: ProbeConfig,
                spec: AugmentSpec) -> LinearHead:
    """Fit the linear head on a frozen encoder.

    Standard probes train on cached clean features; r-LE attacks every batch
    end to end through the frozen encoder before the head update.
    """
    cfg.validate()
    if data.labels is None:
        raise LabelMismatch("probe training needs labels")
    num_classes = int(data.labels.max()) + 1
    head = LinearHead.initialized(encoder.spec.embed_dim, num_classes)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.betas)
    n = data.n
    batches = max(n // cfg.batch_size, 1)

    features = None
    views = None
    if cfg.robust:
        views = _probe_views(data, cfg, spec)
        channels = data.shape[2]
        tables = [v.flat_gather_tables(channels) for v in views]
        src_cols = data.flat_columns()
    else:
        features = probe_features(encoder, data, cfg, spec)

    for epoch in range(cfg.epochs):
        order = generator(cfg.seed, "probe-order", epoch).permutation(n)
        for b in range(batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            labels = data.labels[idx]
            if cfg.robust:
                batch_tables = [(t[0][idx], t[1][idx]) for t in tables]
                fn = _pipeline_loss_and_grad(encoder, head, labels,
                                             batch_tables, channels)
                x = src_cols[:, idx]
                delta = pgd(fn, x, cfg.attack,
                            seed=derive(cfg.seed, "rle-attack", epoch, b))
                x_adv = np.clip(x + delta, 0.0, 1.0)
                z = _features_from_source(encoder, x_adv, batch_tables)
            else:
                z = features[:, idx]
            hparams = head.param_nodes(trainable=True)
            logits, _ = head.logits(ad.constant(z), params=hparams)
            loss = cross_entropy(logits, labels)
            grads = ad.backward(loss)
            optimizer_step(head.store, {k: grads[v] for k, v in hparams.items()}, opt)
    return head


def _features_from_source(encoder: Encoder, x_cols: np.ndarray, tables) -> np.ndarray:
    x = ad.constant(x_cols)
    zs = [encoder.embed(ad.column_gather(x, idx, wts))[0].value for idx, wts in tables]
    if len(zs) == 1:
        return zs[0]
    return _renormalize(np.mean(zs, axis=0))


def _eval_attack_config(eps: float, steps: int) -> AttackConfig:
    alpha = 2.5 * eps / steps if (steps and eps > 0) else None
    return AttackConfig(epsilon=eps, steps=steps, alpha=alpha,
                        objective="cross_entropy", random_start=True)


def evaluate(encoder: Encoder, head: LinearHead, data: ImageBatch,
             cfg: ProbeConfig, spec: AugmentSpec,
             eps_fractions: list[tuple[int, int]],
             attack_steps: int = EVAL_ATTACK_STEPS,
             attack_through_views: bool = False,
             run_id: str = "", report_path: str | Path | None = None) -> list[dict]:
    """Clean and robust top-1 at each epsilon; one report row per epsilon.

    The robust number attacks the full pipeline end to end (source-image
    perturbation through the crop maps) unless ``attack_through_views``
    selects independent per-view perturbations.
    """
    cfg.validate()
    if data.labels is None:
        raise LabelMismatch("evaluation needs labels")
    views = _probe_views(data, cfg, spec)
    channels = data.shape[2]
    tables = [v.flat_gather_tables(channels) for v in views]
    src_cols = data.flat_columns()
    n = data.n
    batch = cfg.batch_size
    slices = [np.arange(b * batch, min((b + 1) * batch, n))
              for b in range((n + batch - 1) // batch)]

    def clean_chunk(idx):
        batch_tables = [(t[0][idx], t[1][idx]) for t in tables]
        z = _features_from_source(encoder, src_cols[:, idx], batch_tables)
        return head.predict(z) == data.labels[idx]

    clean_hits = np.concatenate(map_chunks(clean_chunk, slices))
    clean_acc = float(clean_hits.mean())

    rows = []
    for num, den in eps_fractions:
        eps = num / den
        atk = _eval_attack_config(eps, attack_steps)

        def robust_chunk(idx, atk=atk):
            labels = data.labels[idx]
            batch_tables = [(t[0][idx], t[1][idx]) for t in tables]
            if attack_through_views:
                stacked = np.stack([v.flat_columns()[:, idx] for v in views])
                fn = _view_loss_and_grad(encoder, head, labels)
                delta = pgd(fn, stacked, atk, seed=derive(cfg.seed, "eval", num, int(idx[0])))
                adv = np.clip(stacked + delta, 0.0, 1.0)
                leaves = [ad.constant(v) for v in adv]
                zs = [encoder.embed(x)[0].value for x in leaves]
                z = zs[0] if len(zs) == 1 else _renormalize(np.mean(zs, axis=0))
            else:
                fn = _pipeline_loss_and_grad(encoder, head, labels, batch_tables, channels)
                x = src_cols[:, idx]
                delta = pgd(fn, x, atk, seed=derive(cfg.seed, "eval", num, int(idx[0])))
                z = _features_from_source(encoder, np.clip(x + delta, 0.0, 1.0),
                                          batch_tables)
            return head.predict(z) == labels

        if eps == 0.0:
            robust_acc = clean_acc
        else:
            hits = np.concatenate(map_chunks(robust_chunk, slices))
            robust_acc = float(hits.mean())
        rows.append({
            "run_id": run_id,
            "protocol": cfg.protocol,
            "n": cfg.n if cfg.protocol == "aggregate" else 1,
            "robust_probe": int(cfg.robust),
            "epsilon_num": num,
            "epsilon_den": den,
            "clean_acc": clean_acc,
            "robust_acc": robust_acc,
            "attack_steps": attack_steps,
            "seed": cfg.seed,
        })
    if report_path is not None:
        append_report(report_path, rows)
    return rows


def append_report(path: str | Path, rows: list[dict]):
    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row["run_id"], row["protocol"], row["n"],
                             row["robust_probe"], row["epsilon_num"],
                             row["epsilon_den"], repr(row["clean_acc"]),
                             repr(row["robust_acc"]), row["attack_steps"],
                             row["seed"]])
