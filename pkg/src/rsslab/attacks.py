"""l-inf adversarial example generation.

Two mechanisms: k-step PGD against any differentiable scalar (the attacker
ascends the loss), and the single sign step of free adversarial training,
which reuses the gradient already computed for the parameter update and
keeps one persistent perturbation slice per (example, crop slot).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import SchemeMismatch, ShapeMismatch
from .losses import TcrConfig, empssl_objective, nt_xent
from .models import Encoder
from .seeding import generator

# loss_and_grad: pixels -> (loss value, gradient of loss wrt pixels)
LossAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]

SCHEMES = ("empssl", "simclr")


@dataclass(frozen=True)
class AttackConfig:
    """l-inf attack on the [0,1] pixel scale.

    alpha defaults to 2.5 * epsilon / steps, which reaches the ball boundary
    with slack. epsilon = 0 is the no-op attack used for standard training.
    """

    epsilon: float
    steps: int = 5
    alpha: float | None = None
    objective: str = "ssl_loss"
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps >= 1 and self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.objective not in ("ssl_loss", "cross_entropy"):
            raise ValueError(f"unknown attack objective {self.objective!r}")

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.epsilon / max(self.steps, 1)


def pgd(loss_and_grad: LossAndGrad, x: np.ndarray, cfg: AttackConfig,
        seed: int = 0) -> np.ndarray:
    """k steps of sign-gradient ascent projected onto the epsilon ball.

    Returns the perturbation delta with ||delta||_inf <= epsilon and
    x + delta inside [0, 1]. Deterministic in (loss, x, cfg, seed).
    """
    if cfg.epsilon == 0.0 or cfg.steps == 0:
        return np.zeros_like(x)
    if cfg.random_start:
        delta = generator(seed, "pgd-start").uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    else:
        delta = np.zeros_like(x)
    x_adv = np.clip(x + delta, 0.0, 1.0)
    alpha = cfg.step_size
    for _ in range(cfg.steps):
        _, grad = loss_and_grad(x_adv)
        delta = np.clip(x_adv - x + alpha * np.sign(grad), -cfg.epsilon, cfg.epsilon)
        x_adv = np.clip(x + delta, 0.0, 1.0)
    return x_adv - x


class PerturbationBuffer:
    """Persistent deltas, one slice per (example, attacked slot).

    Free training never resets the buffer: deltas survive minibatch replays,
    later batches, and re-augmentation of the same image.
    """

    def __init__(self, n_examples: int, slots: int, view_pixels: int, epsilon: float):
        self.delta = np.zeros((n_examples, slots, view_pixels))
        self.epsilon = float(epsilon)
        self.update_count = 0

    def slices(self, example_idx: np.ndarray) -> np.ndarray:
        """(len(idx), slots, view_pixels) view of the stored deltas."""
        return self.delta[example_idx]

    def free_step(self, example_idx: np.ndarray, grad: np.ndarray):
        """delta += eps * sign(grad), then project back onto the ball."""
        if grad.shape != (len(example_idx),) + self.delta.shape[1:]:
            raise ShapeMismatch(
                f"free step gradient {grad.shape} does not match buffer slice")
        updated = self.delta[example_idx] + self.epsilon * np.sign(grad)
        self.delta[example_idx] = np.clip(updated, -self.epsilon, self.epsilon)
        self.update_count += 1

    def max_abs(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0


def free_step(buf: PerturbationBuffer, example_idx: np.ndarray, grad: np.ndarray):
    buf.free_step(example_idx, grad)
    return buf


def empssl_loss_and_grads(encoder: Encoder, view_cols: Sequence[np.ndarray],
                          cfg: TcrConfig, include_tcr: bool = True,
                          train_params: bool = False):
    """One backward pass through the multi-crop objective.

    Returns (loss, per-view pixel gradients, parameter gradients or None).
    Gradients of all views come from the same graph because the objective
    couples crops through the mean embedding.
    """
    params = encoder.param_nodes(trainable=train_params)
    leaves = [ad.leaf(v) for v in view_cols]
    embeddings = [encoder.embed(x, params=params)[0] for x in leaves]
    loss = empssl_objective(embeddings, cfg, include_tcr=include_tcr)
    grads = ad.backward(loss, leaves=leaves)
    pixel_grads = [grads[x] for x in leaves]
    param_grads = {k: grads[v] for k, v in params.items()} if train_params else None
    return loss.item(), pixel_grads, param_grads


def simclr_loss_and_grad(encoder: Encoder, clean_cols: np.ndarray,
                         adv_cols: np.ndarray, cfg: TcrConfig,
                         include_clean_pair: bool = False,
                         clean_pair_cols: np.ndarray | None = None,
                         train_params: bool = False):
    """NT-Xent over (clean view, adversarial view) positive pairs.

    With ``include_clean_pair`` the loss adds the conventional clean-pair
    term; the default keeps only the adversarial pairing.
    """
    params = encoder.param_nodes(trainable=train_params)
    adv_leaf = ad.leaf(adv_cols)
    z_clean = encoder.embed(ad.constant(clean_cols), params=params)[0]
    z_adv = encoder.embed(adv_leaf, params=params)[0]
    loss = nt_xent(z_clean, z_adv, cfg.tau)
    if include_clean_pair:
        if clean_pair_cols is None:
            raise SchemeMismatch("clean-pair variant needs the second clean view")
        z_pair = encoder.embed(ad.constant(clean_pair_cols), params=params)[0]
        loss = ad.scale(loss + nt_xent(z_clean, z_pair, cfg.tau), 0.5)
    grads = ad.backward(loss, leaves=[adv_leaf])
    param_grads = {k: grads[v] for k, v in params.items()} if train_params else None
    return loss.item(), grads[adv_leaf], param_grads


def ssl_attack_objective(encoder: Encoder, scheme: str, cfg: TcrConfig,
                         clean_cols: np.ndarray | None = None,
                         crops: int | None = None,
                         include_tcr: bool = True) -> LossAndGrad:
    """Adapter from a scheme's SSL loss to pgd's (loss, grad) interface.

    empssl: x is the (C, P, n) stack of all crop views, attacked jointly.
    simclr: x is the (P, n) second view; ``clean_cols`` holds the fixed
    clean first view.
    """
    if scheme == "empssl":
        def fn(x: np.ndarray):
            if x.ndim != 3 or (crops is not None and x.shape[0] != crops):
                raise SchemeMismatch(f"empssl attack expects (C, P, n) views, got {x.shape}")
            loss, pixel_grads, _ = empssl_loss_and_grads(
                encoder, list(x), cfg, include_tcr=include_tcr)
            return loss, np.stack(pixel_grads)
        return fn
    if scheme == "simclr":
        if clean_cols is None:
            raise SchemeMismatch("simclr attack needs the clean view")

        def fn(x: np.ndarray):
            if x.shape != clean_cols.shape:
                raise SchemeMismatch(
                    f"simclr attack expects view shape {clean_cols.shape}, got {x.shape}")
            loss, grad, _ = simclr_loss_and_grad(encoder, clean_cols, x, cfg)
            return loss, grad
        return fn
    raise SchemeMismatch(f"unknown attack scheme {scheme!r}")
