"""Encoders, projector, linear heads, parameter storage and serialization.

Backbones are MLPs over flattened pixels; the final linear layer is the
projector whose outputs are column-normalized onto the unit sphere. All
forward passes build differentiation graphs so both parameter gradients
(training) and pixel gradients (attacks) come from the same machinery.

Matrices are column-major throughout: one sample per column.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import FormatError, ShapeMismatch
from .seeding import generator

MAGIC = b"RSSL1"
NORM_GUARD = 1e-12


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden: tuple[int, ...] = (256,)
    activation: str = "relu"
    embed_dim: int = 32

    def __post_init__(self):
        if self.input_dim < 1 or self.embed_dim < 2:
            raise ValueError("input_dim >= 1 and embed_dim >= 2 required")
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden, self.embed_dim]
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]


class ParameterStore:
    """Named float64 tensors plus an optimizer-step counter."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None):
        self.tensors: dict[str, np.ndarray] = {}
        if tensors:
            for name, t in tensors.items():
                self.tensors[name] = np.asarray(t, dtype=np.float64)
        self.step_count = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name in self.tensors and self.tensors[name].shape != value.shape:
            raise ShapeMismatch(f"tensor {name} shape is fixed at {self.tensors[name].shape}")
        self.tensors[name] = np.asarray(value, dtype=np.float64)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def copy(self) -> "ParameterStore":
        out = ParameterStore({k: v.copy() for k, v in self.tensors.items()})
        out.step_count = self.step_count
        return out


def init_encoder(spec: EncoderSpec, seed: int) -> ParameterStore:
    """He-uniform weights, zero biases, seeded from the run seed."""
    store = ParameterStore()
    for i, (out_dim, in_dim) in enumerate(spec.layer_dims()):
        rng = generator(seed, "init", i)
        bound = np.sqrt(6.0 / in_dim)
        store[f"w{i}"] = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        store[f"b{i}"] = np.zeros((out_dim, 1))
    return store


def init_head(embed_dim: int, num_classes: int) -> ParameterStore:
    """Zero-initialized linear classifier (d x K weight, K x 1 bias)."""
    store = ParameterStore()
    store["w"] = np.zeros((embed_dim, num_classes))
    store["b"] = np.zeros((num_classes, 1))
    return store


class Encoder:
    """MLP backbone + projector with unit-norm outputs."""

    def __init__(self, spec: EncoderSpec, store: ParameterStore):
        self.spec = spec
        self.store = store

    @classmethod
    def initialized(cls, spec: EncoderSpec, seed: int) -> "Encoder":
        return cls(spec, init_encoder(spec, seed))

    def param_nodes(self, trainable: bool) -> dict[str, Node]:
        wrap = ad.leaf if trainable else ad.constant
        return {name: wrap(self.store[name]) for name in self.store.names()}

    def embed(self, x: Node, params: dict[str, Node] | None = None,
              trainable: bool = False) -> tuple[Node, dict[str, Node]]:
        """Normalized d x n embeddings of flattened pixel columns.

        Degenerate projector outputs (norm < 1e-12) fall back to the first
        basis vector so downstream cosine terms stay finite.
        """
        if x.shape[0] != self.spec.input_dim:
            raise ShapeMismatch(
                f"encoder expects {self.spec.input_dim} rows, got {x.shape[0]}")
        if params is None:
            params = self.param_nodes(trainable)
        act = ad.relu if self.spec.activation == "relu" else ad.tanh
        h = x
        last = len(self.spec.layer_dims()) - 1
        for i in range(last + 1):
            h = ad.matmul(params[f"w{i}"], h) + params[f"b{i}"]
            if i < last:
                h = act(h)
        return ad.normalize_cols(h, NORM_GUARD), params

    def embed_pixels(self, pixels: np.ndarray) -> np.ndarray:
        """Convenience non-training forward: (n, H, W, ch) -> (d, n) ndarray."""
        n = pixels.shape[0]
        x = ad.constant(np.ascontiguousarray(pixels.reshape(n, -1).T))
        z, _ = self.embed(x)
        return z.value


class LinearHead:
    """Linear classifier over embeddings: logits = W^T z + b."""

    def __init__(self, store: ParameterStore):
        self.store = store

    @classmethod
    def initialized(cls, embed_dim: int, num_classes: int) -> "LinearHead":
        return cls(init_head(embed_dim, num_classes))

    @property
    def num_classes(self) -> int:
        return self.store["w"].shape[1]

    def param_nodes(self, trainable: bool) -> dict[str, Node]:
        wrap = ad.leaf if trainable else ad.constant
        return {name: wrap(self.store[name]) for name in self.store.names()}

    def logits(self, z: Node, params: dict[str, Node] | None = None,
               trainable: bool = False) -> tuple[Node, dict[str, Node]]:
        """(K, n) logits for d x n embeddings."""
        if params is None:
            params = self.param_nodes(trainable)
        if z.shape[0] != self.store["w"].shape[0]:
            raise ShapeMismatch(
                f"head expects {self.store['w'].shape[0]}-dim embeddings, got {z.shape[0]}")
        return ad.matmul(ad.transpose(params["w"]), z) + params["b"], params

    def predict(self, z_values: np.ndarray) -> np.ndarray:
        """Argmax labels; ties break to the lowest class index."""
        logits = self.store["w"].T @ z_values + self.store["b"]
        return np.argmax(logits, axis=0)


def cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean cross entropy of (K, n) logits against integer labels."""
    k, n = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"expected {n} labels, got {labels.shape}")
    onehot = np.zeros((k, n))
    onehot[labels, np.arange(n)] = 1.0
    lse = ad.logsumexp_cols(logits)  # (1, n)
    picked = ad.sum_cols(ad.mul(logits, ad.constant(onehot)))  # (1, n)
    return ad.mean_all(lse - picked)


def save_params(store: ParameterStore, path: str | Path):
    """Binary layout: magic, then per-tensor (name len, name, rank, dims, float64 LE)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name in store.names():
            t = store[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_params(path: str | Path) -> ParameterStore:
    """Inverse of save_params; bit-exact round trip. Raises FormatError on damage."""
    blob = Path(path).read_bytes()
    if blob[:5] != MAGIC:
        raise FormatError("bad magic; not a weight file")
    store = ParameterStore()
    off = 5

    def take(nbytes: int) -> bytes:
        nonlocal off
        if off + nbytes > len(blob):
            raise FormatError("truncated weight file")
        chunk = blob[off:off + nbytes]
        off += nbytes
        return chunk

    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = take(8 * count)
        store.tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return store
