"""Objective functions: total coding rate, invariance, multi-crop loss, NT-Xent.

All functions build differentiation graphs (see ``autodiff``) and return a
1x1 Node. Embedding matrices are d x b with one column per sample; the
multi-crop and contrastive losses assume unit-norm columns, which the
projector guarantees.

Sign convention: every function returns a quantity to MINIMIZE. The
multi-crop objective is the negated coding-rate-plus-invariance sum, so the
trainer descends it while an adversary ascends the same scalar.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import DegenerateBatch, EmptyCropSet, ShapeMismatch


@dataclass(frozen=True)
class TcrConfig:
    """Loss hyperparameters.

    eps_sq is the coding-rate distortion, lam weights the invariance term,
    tau is the contrastive temperature. Defaults are conventional; presets
    override them.
    """

    eps_sq: float = 0.2
    lam: float = 200.0
    tau: float = 0.5

    def __post_init__(self):
        if self.eps_sq <= 0:
            raise ValueError("eps_sq must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")


def _as_node(z) -> Node:
    return z if isinstance(z, Node) else ad.constant(z)


def total_coding_rate(z, cfg: TcrConfig) -> Node:
    """(1/2) log det(I + (d / (b eps^2)) Z Z^T) for a d x b embedding batch.

    Nonnegative for any finite Z; grows with the spread of the embedding
    spectrum, so maximizing it fights dimensional collapse.
    """
    z = _as_node(z)
    d, b = z.shape
    coef = d / (b * cfg.eps_sq)
    gram = ad.matmul(z, ad.transpose(z))
    return ad.scale(ad.logdet_spd(ad.constant(np.eye(d)) + ad.scale(gram, coef)), 0.5)


def invariance(zi, z_mean) -> Node:
    """Trace alignment Tr(Z_i^T Z_mean): summed per-sample inner products."""
    zi = _as_node(zi)
    z_mean = _as_node(z_mean)
    if zi.shape != z_mean.shape:
        raise ShapeMismatch(f"invariance shapes {zi.shape} vs {z_mean.shape}")
    return ad.sum_all(ad.mul(zi, z_mean))


def crop_mean(crops: Sequence[Node]) -> Node:
    """Entrywise mean embedding over crop slots."""
    if not crops:
        raise EmptyCropSet("need at least one crop")
    total = crops[0]
    for z in crops[1:]:
        total = total + z
    return ad.scale(total, 1.0 / len(crops))


def empssl_terms(crops: Sequence[Node], cfg: TcrConfig,
                 include_tcr: bool = True) -> tuple[Node, list[Node], list[Node]]:
    """Objective plus its per-crop components, from one shared graph.

    Returns (loss, coding-rate nodes, invariance nodes); the coding-rate
    list is empty when ``include_tcr=False``.
    """
    if not crops:
        raise EmptyCropSet("objective over zero crops")
    z_mean = crop_mean(crops)
    rates: list[Node] = []
    aligns: list[Node] = []
    total = None
    for z in crops:
        align = invariance(z, z_mean)
        aligns.append(align)
        term = ad.scale(align, cfg.lam)
        if include_tcr:
            rate = total_coding_rate(z, cfg)
            rates.append(rate)
            term = rate + term
        total = term if total is None else total + term
    return ad.scale(total, -1.0 / len(crops)), rates, aligns


def empssl_objective(crops: Sequence[Node], cfg: TcrConfig,
                     include_tcr: bool = True) -> Node:
    """Multi-crop training loss: -(1/C) sum_i [R(Z_i) + lam * D(Z_i, Z_mean)].

    Minimizing this maximizes coding rate plus alignment; an attacker
    ascends the same scalar. ``include_tcr=False`` keeps only the invariance
    term (used by the collapse ablation).
    """
    return empssl_terms(crops, cfg, include_tcr)[0]


def nt_xent(z1, z2, tau: float) -> Node:
    """Normalized-temperature cross entropy over a batch of positive pairs.

    Columns j of z1 and z2 are the two views of image j. Every one of the
    2N embeddings serves as an anchor whose positive is its partner view;
    the softmax denominator runs over the other 2N - 1 embeddings
    (self-similarity excluded).
    """
    z1, z2 = _as_node(z1), _as_node(z2)
    if z1.shape != z2.shape:
        raise ShapeMismatch(f"pair shapes {z1.shape} vs {z2.shape}")
    n = z1.shape[1]
    if n < 2:
        raise DegenerateBatch("contrastive loss needs at least 2 images per batch")
    z = ad.hstack([z1, z2])
    sims = ad.scale(ad.matmul(ad.transpose(z), z), 1.0 / tau)
    denom = ad.logsumexp_rows_offdiag(sims)  # (2n, 1)
    pos = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    pos[idx, idx + n] = 1.0
    pos[idx + n, idx] = 1.0
    pos_sims = ad.sum_rows(ad.mul(sims, ad.constant(pos)))  # (2n, 1)
    return ad.mean_all(denom - pos_sims)
