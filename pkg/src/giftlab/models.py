"""Embedding network, adapters, classifier and the stack that wires them.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"GIFTCKPT"
    8       2     format version (u16, currently 1)
    10      4     manifest length N in bytes (u32)
    14      N     UTF-8 JSON manifest {"arch": ..., "meta": ..., "params": [[name, shape, group], ...]}
    14+N    ...   parameter values as float64, concatenated in manifest order

The manifest is written with sorted keys and no whitespace, so saving a
loaded checkpoint reproduces the original file byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Rng, Tensor
from .errors import ConfigError, DataError, DimensionError, FormatError
from .nn import GLU, GROUPS, Layer, LayerNorm, Linear, Param, ReLU, Sequential, StatsPool, softmax_xent

ADAPTER_KINDS = ("none", "glu", "ra")


@dataclass
class ModelArch:
    d_f: int = 24
    h_f: int = 64
    L_f: int = 2
    d_e: int = 64
    adapter: str = "glu"
    h_a: int = 64
    d_a: int = 64
    h_r: int = 0  # 0: solved so the residual adapter matches the GLU adapter's size
    n_speakers: int = 0  # 0: no classifier (embedding-only checkpoint)

    def __post_init__(self):
        if self.adapter not in ADAPTER_KINDS:
            raise ConfigError(f"model.adapter must be one of {ADAPTER_KINDS}, got {self.adapter!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "adapter" and (not isinstance(v, int) or v < 0):
                raise ConfigError(f"model.{f.name} must be a non-negative integer, got {v!r}")
        for name in ("d_f", "h_f", "L_f", "d_e", "h_a", "d_a"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def ra_hidden(self) -> int:
        return self.h_r or solve_ra_hidden(glu_adapter_size(self.d_e, self.h_a, self.d_a), self.d_e)


def glu_adapter_size(d_e: int, h_a: int, d_a: int) -> int:
    """Closed-form parameter count of Linear -> ReLU -> LayerNorm -> GLU -> Linear."""
    return (d_e * h_a + h_a) + 2 * h_a + 2 * (h_a * h_a + h_a) + (h_a * d_a + d_a)


def residual_adapter_size(d_e: int, h_r: int) -> int:
    return 2 * d_e + (d_e * h_r + h_r) + (h_r * d_e + d_e)


def solve_ra_hidden(target: int, d_e: int) -> int:
    """Bottleneck width whose residual adapter is closest to ``target`` parameters."""
    return max(1, int(round((target - 3 * d_e) / (2 * d_e + 1))))


class EmbeddingNet(Layer):
    """Frame MLP, statistics pooling, then a segment-level projection to E_out."""

    def __init__(self, d_f: int, h_f: int, L_f: int, d_e: int, rng: Rng | None = None):
        super().__init__()
        layers: list[Layer] = []
        d = d_f
        for i in range(L_f):
            layers += [Linear(d, h_f, f"embedding.frame{i}", "embedding", rng), ReLU()]
            d = h_f
        self.frame_mlp = Sequential(layers)
        self.pool = StatsPool()
        self.segment_mlp = Linear(2 * h_f, d_e, "embedding.segment", "embedding", rng)
        self.params = self.frame_mlp.params + self.segment_mlp.params
        self.d_f = d_f

    def forward(self, frames: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
        if frames.ndim != 2 or frames.shape[1] != self.d_f:
            raise DimensionError(f"embedding expects frames of width {self.d_f}, got {frames.shape}")
        h = self.frame_mlp.forward(frames)
        return self.segment_mlp.forward(self.pool.forward(h, lengths))

    def backward(self, dy):
        return self.frame_mlp.backward(self.pool.backward(self.segment_mlp.backward(dy)))


class GluAdapter(Layer):
    """Linear -> ReLU -> LayerNorm -> GLU -> Linear.

    After a forward, ``g_in``, ``g_out`` and ``a_out`` hold the LayerNorm
    output, the GLU output and the final projection respectively.
    """

    def __init__(self, d_e: int, h_a: int, d_a: int, rng: Rng | None = None):
        super().__init__()
        self.in_proj = Linear(d_e, h_a, "adapter.in_proj", "adapter", rng)
        self.activation = ReLU()
        self.norm = LayerNorm(h_a, "adapter.norm", "adapter")
        self.glu = GLU(h_a, h_a, "adapter.glu", "adapter", rng)
        self.out_proj = Linear(h_a, d_a, "adapter.out_proj", "adapter", rng)
        self.params = (
            self.in_proj.params + self.norm.params + self.glu.params + self.out_proj.params
        )
        self.g_in = self.g_out = self.a_out = None

    def forward(self, x):
        self.g_in = self.norm.forward(self.activation.forward(self.in_proj.forward(x)))
        self.g_out = self.glu.forward(self.g_in)
        self.a_out = self.out_proj.forward(self.g_out)
        return self.a_out

    def backward(self, dy):
        dy = self.glu.backward(self.out_proj.backward(dy))
        return self.in_proj.backward(self.activation.backward(self.norm.backward(dy)))


class ResidualAdapter(Layer):
    """``x + up(ReLU(down(LayerNorm(x))))`` bottleneck adapter."""

    def __init__(self, d_e: int, h_r: int, rng: Rng | None = None):
        super().__init__()
        self.branch = Sequential([
            LayerNorm(d_e, "adapter.norm", "adapter"),
            Linear(d_e, h_r, "adapter.down", "adapter", rng),
            ReLU(),
            Linear(h_r, d_e, "adapter.up", "adapter", rng),
        ])
        self.params = self.branch.params

    def forward(self, x):
        return x + self.branch.forward(x)

    def backward(self, dy):
        return dy + self.branch.backward(dy)


class Classifier(Linear):
    def __init__(self, d_in: int, n_speakers: int, rng: Rng | None = None):
        super().__init__(d_in, n_speakers, "classifier.proj", "classifier", rng)


@dataclass
class StackOutput:
    e_out: Tensor
    a_out: Tensor | None
    logits: Tensor | None

    @property
    def embedding(self) -> Tensor:
        return self.a_out if self.a_out is not None else self.e_out


class ModelStack:
    """Embedding network, optional adapter and optional classifier head."""

    def __init__(self, arch: ModelArch, embedding: EmbeddingNet, adapter: Layer | None, classifier: Classifier | None):
        self.arch = arch
        self.embedding = embedding
        self.adapter = adapter
        self.classifier = classifier
        self.meta: dict = {}
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names in stack")
        self._lengths: list[int] | None = None

    @property
    def params(self) -> list[Param]:
        out = list(self.embedding.params)
        if self.adapter is not None:
            out += self.adapter.params
        if self.classifier is not None:
            out += self.classifier.params
        return out

    @property
    def embedding_tap(self) -> str:
        return "a_out" if self.adapter is not None else "e_out"

    def groups(self) -> set[str]:
        return {p.group for p in self.params}

    def trainable_set(self, groups: Iterable[str]) -> list[Param]:
        groups = set(groups)
        if not groups:
            raise ConfigError("trainable_set needs at least one group")
        unknown = groups - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}")
        chosen = [p for p in self.params if p.group in groups]
        for g in sorted(groups):
            if not any(p.group == g for p in chosen):
                raise ConfigError(f"parameter group {g!r} has no parameters in this stack")
        return chosen

    def n_params(self, group: str | None = None) -> int:
        return sum(p.size for p in self.params if group is None or p.group == group)

    # -- forward / backward over a batch of utterances --------------------

    def forward_batch(self, utterances: Sequence[Tensor], classify: bool = True) -> StackOutput:
        lengths = [u.shape[0] for u in utterances]
        if any(t < 2 for t in lengths):
            raise DataError("every utterance needs at least 2 frames for statistics pooling")
        frames = np.concatenate(utterances, axis=0) if len(utterances) > 1 else utterances[0]
        e_out = self.embedding.forward(frames, lengths)
        a_out = self.adapter.forward(e_out) if self.adapter is not None else None
        logits = None
        if classify and self.classifier is not None:
            logits = self.classifier.forward(a_out if a_out is not None else e_out)
        self._lengths = lengths
        return StackOutput(e_out, a_out, logits)

    def backward(self, dlogits: Tensor, through_embedding: bool = True) -> list[Tensor] | None:
        """Back-propagate a logits gradient; returns per-utterance frame gradients.

        With ``through_embedding=False`` propagation stops at E_out, leaving
        embedding grads untouched (and returning None).
        """
        if self._lengths is None:
            raise RuntimeError("ModelStack.backward called without a pending forward")
        lengths, self._lengths = self._lengths, None
        dy = self.classifier.backward(dlogits)
        if self.adapter is not None:
            dy = self.adapter.backward(dy)
        if not through_embedding:
            _drop_caches(self.embedding)
            return None
        dframes = self.embedding.backward(dy)
        return np.split(dframes, np.cumsum(lengths)[:-1], axis=0)

    def forward_utterance(self, frames: Tensor) -> tuple[Tensor, Tensor | None, Tensor | None]:
        if frames.ndim != 2 or frames.shape[0] < 2:
            raise DataError(f"utterance needs shape (T>=2, d_f), got {frames.shape}")
        out = self.forward_batch([frames])
        self._lengths = None
        return (
            out.e_out[0],
            None if out.a_out is None else out.a_out[0],
            None if out.logits is None else out.logits[0],
        )

    def embed(self, utterances: Sequence[Tensor]) -> Tensor:
        """Speaker embeddings (A_out with an adapter, else E_out); classifier unused."""
        out = self.forward_batch(utterances, classify=False)
        self._lengths = None
        return out.embedding

    def loss_closure(self, utterances: Sequence[Tensor], labels: Sequence[int]):
        """Cross-entropy closure over a batch, for ``nn.gradcheck``."""
        inputs = [np.array(u, dtype=np.float64) for u in utterances]
        labels = np.asarray(labels)

        def closure(backward: bool):
            out = self.forward_batch(inputs)
            loss, dlogits = softmax_xent(out.logits, labels)
            if not backward:
                self._lengths = None
                return loss, []
            for p in self.params:
                p.zero_grad()
            return loss, self.backward(dlogits)

        return closure, self.params, inputs


def _drop_caches(layer: Layer) -> None:
    layer._cache = None
    for child in vars(layer).values():
        if isinstance(child, Layer):
            _drop_caches(child)
        elif isinstance(child, list):
            for c in child:
                if isinstance(c, Layer):
                    _drop_caches(c)


def stack_from_pretrained(path, arch: ModelArch, rng: Rng) -> ModelStack:
    """Pretrained embedding from ``path`` with a fresh adapter/classifier per ``arch``."""
    source = load_checkpoint(path)
    src = source.arch
    if (src.d_f, src.h_f, src.L_f, src.d_e) != (arch.d_f, arch.h_f, arch.L_f, arch.d_e):
        raise ConfigError(
            f"pretrained embedding dims {(src.d_f, src.h_f, src.L_f, src.d_e)} do not match "
            f"configured {(arch.d_f, arch.h_f, arch.L_f, arch.d_e)}"
        )
    stack = attach_head(source.embedding, arch, rng)
    stack.meta = dict(source.meta)
    return stack


def build_embedding(arch: ModelArch, rng: Rng | None) -> EmbeddingNet:
    return EmbeddingNet(arch.d_f, arch.h_f, arch.L_f, arch.d_e, rng)


def build_adapter(arch: ModelArch, rng: Rng | None) -> Layer | None:
    if arch.adapter == "glu":
        return GluAdapter(arch.d_e, arch.h_a, arch.d_a, rng)
    if arch.adapter == "ra":
        return ResidualAdapter(arch.d_e, arch.ra_hidden, rng)
    return None


def tap_dim(arch: ModelArch) -> int:
    return arch.d_a if arch.adapter == "glu" else arch.d_e


def build_stack(arch: ModelArch, rng: Rng | None) -> ModelStack:
    """Fresh stack; ``rng=None`` gives zero weights (used when loading)."""
    embedding = build_embedding(arch, rng)
    return attach_head(embedding, arch, rng)


def attach_head(embedding: EmbeddingNet, arch: ModelArch, rng: Rng | None) -> ModelStack:
    """Put a freshly initialised adapter and classifier on top of ``embedding``."""
    adapter = build_adapter(arch, rng)
    classifier = Classifier(tap_dim(arch), arch.n_speakers, rng) if arch.n_speakers > 0 else None
    return ModelStack(arch, embedding, adapter, classifier)


def copy_stack(stack: ModelStack) -> ModelStack:
    twin = build_stack(stack.arch, None)
    for dst, src in zip(twin.params, stack.params):
        dst.value[...] = src.value
    twin.meta = dict(stack.meta)
    return twin


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"GIFTCKPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sHI")


def checkpoint_bytes(stack: ModelStack, groups: Iterable[str] | None = None, meta: dict | None = None) -> bytes:
    arch = stack.arch
    params = stack.params
    if groups is not None:
        groups = set(groups)
        params = [p for p in params if p.group in groups]
        arch = ModelArch(**{
            **arch.to_dict(),
            "adapter": arch.adapter if "adapter" in groups else "none",
            "n_speakers": arch.n_speakers if "classifier" in groups else 0,
        })
    manifest = {
        "arch": arch.to_dict(),
        "meta": meta if meta is not None else stack.meta,
        "params": [[p.name, list(p.value.shape), p.group] for p in params],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(p.value.astype("<f8").tobytes() for p in params)
    return _HEADER.pack(MAGIC, CHECKPOINT_VERSION, len(blob)) + blob + body


def save_checkpoint(stack: ModelStack, path, groups: Iterable[str] | None = None, meta: dict | None = None) -> None:
    """Write ``stack`` (optionally only some parameter groups) to ``path``."""
    Path(path).write_bytes(checkpoint_bytes(stack, groups, meta))


def parse_checkpoint(data: bytes) -> ModelStack:
    if len(data) < _HEADER.size:
        raise FormatError("checkpoint truncated inside header", len(data))
    magic, version, mlen = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    start = _HEADER.size
    if len(data) < start + mlen:
        raise FormatError("checkpoint truncated inside manifest", len(data))
    try:
        manifest = json.loads(data[start:start + mlen].decode("utf-8"))
        arch = ModelArch.from_dict(manifest["arch"])
        entries = manifest["params"]
        meta = manifest.get("meta", {})
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"unreadable checkpoint manifest: {exc}", start) from exc
    stack = build_stack(arch, None)
    by_name = {p.name: p for p in stack.params}
    offset = start + mlen
    seen = set()
    for entry in entries:
        try:
            name, shape, group = entry
            shape = tuple(int(s) for s in shape)
        except (ValueError, TypeError) as exc:
            raise FormatError(f"malformed parameter entry {entry!r}", start) from exc
        p = by_name.get(name)
        if p is None or p.group != group:
            raise FormatError(f"unknown layer parameter {name!r} (group {group!r})", start)
        if p.value.shape != shape:
            raise FormatError(f"parameter {name} has shape {shape}, architecture expects {p.value.shape}", start)
        nbytes = 8 * p.size
        if len(data) < offset + nbytes:
            raise FormatError(f"checkpoint truncated inside parameter {name}", len(data))
        p.value[...] = np.frombuffer(data, dtype="<f8", count=p.size, offset=offset).reshape(shape)
        offset += nbytes
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise FormatError(f"checkpoint lacks parameters {sorted(missing)}", offset)
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after parameters", offset)
    stack.meta = meta
    return stack


def load_checkpoint(path) -> ModelStack:
    return parse_checkpoint(Path(path).read_bytes())
