"""Strict JSON run configuration.

A run config document mirrors the training, probing, augmentation and
dataset settings. Parsing is strict: unknown keys are rejected so typos
fail before any work starts. All randomness derives from the single seed
passed on the command line, never from the document.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .attacks import AttackConfig
from .augment import AugmentSpec, StyleJitterLaw
from .data import ContentStyleSpec, ImageBatch, generate, load_idx, split
from .errors import ConfigError, InvalidSpec
from .evaluation import ProbeConfig
from .losses import TcrConfig
from .models import EncoderSpec
from .seeding import derive
from .training import TrainConfig

_REQUIRED = object()


def _take(doc: dict, key: str, default=_REQUIRED, where: str = ""):
    if key in doc:
        return doc.pop(key)
    if default is _REQUIRED:
        raise ConfigError(f"missing key {key!r} in {where or 'config'}")
    return default


def _done(doc: dict, where: str):
    if doc:
        raise ConfigError(f"unknown keys {sorted(doc)} in {where}")


def _pair(value, where: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{where} must be a 2-element list")
    return (float(value[0]), float(value[1]))


def parse_epsilon(value, where: str = "epsilon") -> float:
    """Accept a float or an exact [num, den] fraction."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        num, den = value
        if den == 0:
            raise ConfigError(f"{where} has zero denominator")
        return float(num) / float(den)
    raise ConfigError(f"{where} must be a number or [num, den]")


def parse_eps_fraction(text: str) -> tuple[int, int]:
    """CLI grid entry 'a/b' (or a plain integer numerator over 255)."""
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            frac = (int(num), int(den))
        else:
            frac = (int(text), 255)
    except ValueError:
        raise ConfigError(f"bad epsilon {text!r}; expected a/b") from None
    if frac[1] <= 0 or frac[0] < 0:
        raise ConfigError(f"bad epsilon {text!r}")
    return frac


def _parse_attack(doc, where: str) -> AttackConfig:
    doc = dict(doc)
    eps = parse_epsilon(_take(doc, "epsilon", where=where), f"{where}.epsilon")
    cfg = AttackConfig(
        epsilon=eps,
        steps=int(_take(doc, "steps", 5, where)),
        alpha=(lambda a: None if a is None else float(a))(_take(doc, "alpha", None, where)),
        objective=str(_take(doc, "objective", "ssl_loss", where)),
        random_start=bool(_take(doc, "random_start", False, where)),
    )
    _done(doc, where)
    return cfg


def _parse_loss(doc, where: str) -> TcrConfig:
    doc = dict(doc)
    cfg = TcrConfig(
        eps_sq=float(_take(doc, "eps_sq", 0.2, where)),
        lam=float(_take(doc, "lam", 200.0, where)),
        tau=float(_take(doc, "tau", 0.5, where)),
    )
    _done(doc, where)
    return cfg


def _parse_augment(doc, where: str = "augment") -> AugmentSpec:
    doc = dict(doc)
    jitter_doc = _take(doc, "jitter", None, where)
    jitter = None
    if jitter_doc is not None:
        jd = dict(jitter_doc)
        jitter = StyleJitterLaw(
            scale_range=_pair(_take(jd, "scale_range", [1.0, 1.0], "jitter"), "jitter.scale_range"),
            shift_range=_pair(_take(jd, "shift_range", [0.0, 0.0], "jitter"), "jitter.shift_range"),
        )
        _done(jd, f"{where}.jitter")
    try:
        spec = AugmentSpec(
            mode=str(_take(doc, "mode", "crop", where)),
            scales=_pair(_take(doc, "scales", [0.08, 1.0], where), f"{where}.scales"),
            ratios=_pair(_take(doc, "ratios", [0.75, 1.3], where), f"{where}.ratios"),
            crop_count=int(_take(doc, "crop_count", 16, where)),
            out_size=tuple(int(v) for v in _take(doc, "out_size", where=where)),
            jitter=jitter,
        )
    except InvalidSpec as exc:
        raise ConfigError(str(exc)) from None
    _done(doc, where)
    return spec


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    synthetic: dict | None = None
    idx_paths: dict | None = None
    train_per_class: int = 0

    def load(self, seed: int) -> tuple[ImageBatch, ImageBatch]:
        """Materialize (train, test); synthetic data derives its seed from
        the run seed."""
        if self.kind == "synthetic":
            spec = ContentStyleSpec(seed=derive(seed, "data"), **self.synthetic)
            batch = generate(spec)
            return split(batch, self.train_per_class, seed=derive(seed, "split"))
        train = load_idx(self.idx_paths["train_images"], self.idx_paths["train_labels"])
        test = load_idx(self.idx_paths["test_images"], self.idx_paths["test_labels"])
        return train, test


def _parse_dataset(doc, where: str = "dataset") -> DatasetConfig:
    doc = dict(doc)
    kind = str(_take(doc, "kind", where=where))
    if kind == "synthetic":
        fields = dict(
            num_classes=int(_take(doc, "num_classes", 4, where)),
            per_class=int(_take(doc, "per_class", 300, where)),
            height=int(_take(doc, "height", 16, where)),
            width=int(_take(doc, "width", 16, where)),
            channels=int(_take(doc, "channels", 3, where)),
            content_margin=float(_take(doc, "content_margin", 3.0, where)),
            style_color=float(_take(doc, "style_color", 0.12, where)),
            style_texture=float(_take(doc, "style_texture", 0.08, where)),
            pixel_noise=float(_take(doc, "pixel_noise", 0.02, where)),
        )
        train_per_class = int(_take(doc, "train_per_class", where=where))
        _done(doc, where)
        if train_per_class >= fields["per_class"]:
            raise ConfigError("train_per_class must leave room for a test split")
        return DatasetConfig(kind="synthetic", synthetic=fields,
                             train_per_class=train_per_class)
    if kind == "idx":
        paths = {key: str(_take(doc, key, where=where))
                 for key in ("train_images", "train_labels", "test_images", "test_labels")}
        _done(doc, where)
        return DatasetConfig(kind="idx", idx_paths=paths)
    raise ConfigError(f"unknown dataset kind {kind!r}")


@dataclass(frozen=True)
class RunConfig:
    """Parsed, validated document; seed-independent."""

    dataset: DatasetConfig
    encoder_hidden: tuple[int, ...]
    encoder_activation: str
    embed_dim: int
    augment: AugmentSpec
    train_doc: dict
    probe_doc: dict
    out_dir: str | None

    def image_shape(self) -> tuple[int, int, int]:
        if self.dataset.kind == "synthetic":
            s = self.dataset.synthetic
            return (s["height"], s["width"], s["channels"])
        # idx images are single-channel; shape read lazily at load time
        return (*self.augment.out_size, 1)

    def encoder_spec(self) -> EncoderSpec:
        h, w = self.augment.out_size
        ch = self.image_shape()[2]
        return EncoderSpec(input_dim=h * w * ch, hidden=self.encoder_hidden,
                           activation=self.encoder_activation,
                           embed_dim=self.embed_dim)

    def train_config(self, seed: int) -> TrainConfig:
        doc = dict(self.train_doc)
        attack = _parse_attack(_take(doc, "attack", {"epsilon": [8, 255]}, "train"), "train.attack")
        loss = _parse_loss(_take(doc, "loss", {}, "train"), "train.loss")
        cfg = TrainConfig(
            scheme=str(_take(doc, "scheme", where="train")),
            total_epochs=int(_take(doc, "total_epochs", where="train")),
            replays=int(_take(doc, "replays", 1, "train")),
            crops=int(_take(doc, "crops", self.augment.effective_count(), "train")),
            batch_size=int(_take(doc, "batch_size", 100, "train")),
            optimizer=str(_take(doc, "optimizer", "adam", "train")),
            lr=float(_take(doc, "lr", 1e-3, "train")),
            momentum=float(_take(doc, "momentum", 0.9, "train")),
            betas=_pair(_take(doc, "betas", [0.9, 0.999], "train"), "train.betas"),
            objective_mode=str(_take(doc, "objective_mode", "full", "train")),
            share_delta=bool(_take(doc, "share_delta", False, "train")),
            simclr_clean_pair=bool(_take(doc, "simclr_clean_pair", False, "train")),
            rank_probe=int(_take(doc, "rank_probe", 128, "train")),
            attack=attack,
            loss=loss,
            encoder=self.encoder_spec(),
            augment=self.augment,
            seed=seed,
        )
        _done(doc, "train")
        cfg.validate()
        return cfg

    def probe_config(self, seed: int, protocol: str | None = None,
                     n: int | None = None, robust: bool | None = None) -> ProbeConfig:
        doc = dict(self.probe_doc)
        attack = _parse_attack(
            _take(doc, "attack",
                  {"epsilon": [8, 255], "objective": "cross_entropy"}, "probe"),
            "probe.attack")
        cfg = ProbeConfig(
            protocol=protocol if protocol is not None else str(_take(doc, "protocol", "central", "probe")),
            n=n if n is not None else int(_take(doc, "n", 1, "probe")),
            robust=robust if robust is not None else bool(_take(doc, "robust", False, "probe")),
            epochs=int(_take(doc, "epochs", 20, "probe")),
            batch_size=int(_take(doc, "batch_size", 100, "probe")),
            optimizer=str(_take(doc, "optimizer", "adam", "probe")),
            lr=float(_take(doc, "lr", 0.01, "probe")),
            momentum=float(_take(doc, "momentum", 0.9, "probe")),
            betas=_pair(_take(doc, "betas", [0.9, 0.999], "probe"), "probe.betas"),
            attack=attack,
            seed=derive(seed, "probe"),
        )
        # protocol/n/robust may have been overridden; drop leftovers
        for key in ("protocol", "n", "robust"):
            doc.pop(key, None)
        _done(doc, "probe")
        cfg.validate()
        return cfg


def parse_run_config(doc: dict) -> RunConfig:
    doc = dict(doc)
    dataset = _parse_dataset(_take(doc, "dataset", where="config"))
    enc_doc = dict(_take(doc, "encoder", {}, "config"))
    hidden = tuple(int(v) for v in _take(enc_doc, "hidden", [256], "encoder"))
    activation = str(_take(enc_doc, "activation", "relu", "encoder"))
    embed_dim = int(_take(enc_doc, "embed_dim", 32, "encoder"))
    _done(enc_doc, "encoder")
    augment = _parse_augment(_take(doc, "augment", where="config"))
    train_doc = dict(_take(doc, "train", where="config"))
    probe_doc = dict(_take(doc, "probe", {}, "config"))
    out_dir = _take(doc, "out_dir", None, "config")
    _done(doc, "config")
    return RunConfig(dataset=dataset, encoder_hidden=hidden,
                     encoder_activation=activation, embed_dim=embed_dim,
                     augment=augment, train_doc=train_doc, probe_doc=probe_doc,
                     out_dir=None if out_dir is None else str(out_dir))


def load_run_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = parse_run_config(doc)
    # force full schema validation before any command does real work
    try:
        cfg.train_config(seed=0)
        cfg.probe_config(seed=0)
    except (ValueError, InvalidSpec) as exc:
        raise ConfigError(str(exc)) from None
    return cfg
