"""Built-in numeric self-checks runnable from the CLI.

Four suites: gradient checks against central finite differences, the
matrix-determinant-lemma closed forms, the PGD closed-form optimum on a
linear objective, and the free-training update accounting identity. Each
suite prints one pass/fail line; the command exits nonzero if any fails.

``inject_fault`` deliberately corrupts one quantity so the negative path
(a failing suite that names itself) stays testable.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, pgd
from .augment import AugmentSpec
from .data import ImageBatch
from .errors import RsslabError
from .losses import TcrConfig, empssl_objective, invariance, nt_xent, total_coding_rate
from .models import Encoder, EncoderSpec
from .training import TrainConfig, pretrain

FAULTS = ("logdet-grad-sign",)


def _fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def _rel_err(analytic, numeric, floor=1e-8):
    mask = np.abs(numeric) > floor
    if not mask.any():
        return 0.0
    return float((np.abs(analytic - numeric)[mask] / np.abs(numeric)[mask]).max())


def check_gradients(inject_fault: str | None = None, instances: int = 5) -> tuple[bool, str]:
    cfg = TcrConfig(eps_sq=0.3, lam=1.5, tau=0.5)
    worst = 0.0
    rng = np.random.default_rng(2024)
    for _ in range(instances):
        d, b = rng.integers(3, 7), rng.integers(3, 7)
        z = rng.standard_normal((d, b))

        leaf = ad.leaf(z)
        g = ad.backward(total_coding_rate(leaf, cfg))[leaf]
        if inject_fault == "logdet-grad-sign":
            g = -g
        worst = max(worst, _rel_err(g, _fd_grad(
            lambda v: total_coding_rate(v, cfg).item(), z)))

        zbar = rng.standard_normal((d, b))
        leaf = ad.leaf(z)
        g = ad.backward(invariance(leaf, ad.constant(zbar)))[leaf]
        worst = max(worst, _rel_err(g, _fd_grad(
            lambda v: invariance(v, zbar).item(), z)))

        z2 = rng.standard_normal((d, b))
        z2 /= np.linalg.norm(z2, axis=0)
        zu = z / np.linalg.norm(z, axis=0)
        leaf = ad.leaf(zu)
        g = ad.backward(nt_xent(leaf, ad.constant(z2), cfg.tau))[leaf]
        worst = max(worst, _rel_err(g, _fd_grad(
            lambda v: nt_xent(v, z2, cfg.tau).item(), zu)))

        enc = Encoder.initialized(EncoderSpec(8, (6,), "relu", 4),
                                  seed=int(rng.integers(1 << 31)))
        x = rng.uniform(0.2, 0.8, size=(8, 3))
        w = rng.standard_normal((4, 3))

        def pixel_loss(v):
            zz, _ = enc.embed(ad.constant(v))
            return float((zz.value * w).sum())

        leaf = ad.leaf(x)
        zz, _ = enc.embed(leaf)
        g = ad.backward(ad.sum_all(ad.mul(zz, ad.constant(w))))[leaf]
        worst = max(worst, _rel_err(g, _fd_grad(pixel_loss, x)))
    ok = worst < 1e-4
    return ok, f"max gradient relative error {worst:.3e} (threshold 1e-4)"


def check_determinant_lemma() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    cfg = TcrConfig(eps_sq=0.4, lam=1.0, tau=0.5)
    worst = 0.0
    for _ in range(5):
        u = rng.standard_normal((5, 1))
        v = rng.standard_normal((1, 7))
        z = u @ v
        c = 5 / (7 * cfg.eps_sq)
        expected = 0.5 * np.log(1.0 + c * (z ** 2).sum())
        worst = max(worst, abs(total_coding_rate(z, cfg).item() - expected))
        m = rng.standard_normal((4, 4))
        spd = m @ m.T + np.eye(4)
        scale_err = abs(ad.logdet_spd(3.0 * spd) - (4 * np.log(3.0) + ad.logdet_spd(spd)))
        worst = max(worst, scale_err)
    ok = worst < 1e-8
    return ok, f"max closed-form deviation {worst:.3e} (threshold 1e-8)"


def check_pgd_closed_form() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(5):
        w = rng.standard_normal((4, 6))
        w[np.abs(w) < 0.05] = 0.3
        x = np.full((4, 6), 0.5)

        def fn(xa):
            return float((w * xa).sum()), np.broadcast_to(w, xa.shape).copy()

        eps = 0.08
        delta = pgd(fn, x, AttackConfig(epsilon=eps, steps=5))
        gap = abs(fn(x + delta)[0] - fn(x + eps * np.sign(w))[0])
        worst = max(worst, gap)
        if np.abs(delta).max() > eps + 1e-12:
            return False, "perturbation left the epsilon ball"
    ok = worst < 1e-6
    return ok, f"max gap to the linear-model optimum {worst:.3e} (threshold 1e-6)"


def check_accounting(tmp_dir) -> tuple[bool, str]:
    rng = np.random.default_rng(6)
    pixels = rng.uniform(size=(12, 4, 4, 1))
    data = ImageBatch(pixels, np.tile(np.arange(4), 3))
    cfg = TrainConfig(
        scheme="empssl_free", total_epochs=6, replays=3, crops=2, batch_size=4,
        attack=AttackConfig(epsilon=4 / 255, steps=1),
        loss=TcrConfig(eps_sq=0.2, lam=1.0, tau=0.5),
        encoder=EncoderSpec(16, (6,), "relu", 4),
        augment=AugmentSpec(mode="crop", scales=(0.5, 1.0), ratios=(1.0, 1.0),
                            crop_count=2, out_size=(4, 4)),
        seed=1, rank_probe=8)
    _, manifest = pretrain(data, cfg, tmp_dir)
    batches = 12 // 4
    want_steps = cfg.total_epochs * batches
    ok = (manifest.outer_epochs == cfg.total_epochs // cfg.replays
          and manifest.optimizer_steps == want_steps
          and manifest.delta_updates == want_steps)
    return ok, (f"outer epochs {manifest.outer_epochs}, optimizer steps "
                f"{manifest.optimizer_steps}, delta updates {manifest.delta_updates} "
                f"(expected {cfg.total_epochs // cfg.replays}/{want_steps}/{want_steps})")


def run_selfcheck(inject_fault: str | None = None, out=print) -> int:
    """Run all suites; returns 0 only if every suite passes."""
    import tempfile
    if inject_fault is not None and inject_fault not in FAULTS:
        raise RsslabError(f"unknown fault {inject_fault!r}; available: {FAULTS}")
    results = []
    results.append(("gradient-check", *check_gradients(inject_fault)))
    results.append(("determinant-lemma", *check_determinant_lemma()))
    results.append(("pgd-closed-form", *check_pgd_closed_form()))
    with tempfile.TemporaryDirectory() as tmp:
        results.append(("accounting", *check_accounting(tmp)))
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    if failed:
        out(f"selfcheck FAILED: {', '.join(failed)}")
        return 1
    out("selfcheck passed")
    return 0
