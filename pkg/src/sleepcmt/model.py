"""Epoch and Sequence Cross-Modal Transformers.

Tensor layout is channels-last throughout: an epoch batch is (B, T, M) with
T raw samples and M modalities; a sequence batch is (B, L, T, M).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import ops
from .autograd import Tensor
from .errors import ConfigError, InputError
from .nn import BatchNorm1d, Conv1d, LayerNorm, Linear, Module, MultiHeadAttention, Parameter

WINDOW = 50  # samples per 0.5 s window at 100 Hz

# (kernel, stride) per conv layer in each path; every path reduces by WINDOW.
CNN_PATHS: tuple[tuple[tuple[int, int], ...], ...] = (
    ((50, 50),),
    ((25, 25), (2, 2)),
    ((5, 5), (5, 5), (2, 2)),
)


@dataclass
class ModelConfig:
    embed_dim: int = 128
    ff_dim: int = 512
    heads: int = 8
    modalities: list[str] = field(default_factory=lambda: ["EEG", "EOG"])
    seq_len: int = 5
    blocks_per_attention: int = 1
    leaky_slope: float = 0.01
    num_classes: int = 5
    # Output channels of each CNN path; None means 3 * embed_dim // 2.
    path_channels: int | None = None
    share_epoch_block: bool = False
    inter_epoch_pos_encoding: bool = True
    bn_momentum: float = 0.1
    norm_eps: float = 1e-5
    cls_init_std: float = 0.02
    epoch_samples: int = 3000

    def __post_init__(self) -> None:
        self.modalities = list(self.modalities)
        self.validate()

    @property
    def windows(self) -> int:
        return self.epoch_samples // WINDOW

    @property
    def width(self) -> int:
        return self.path_channels if self.path_channels is not None else 3 * self.embed_dim // 2

    def validate(self) -> None:
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even (positional encoding), got {self.embed_dim}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not self.modalities:
            raise ConfigError("at least one modality is required")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError(f"duplicate modalities: {self.modalities}")
        if self.epoch_samples <= 0 or self.epoch_samples % WINDOW:
            raise ConfigError(
                f"epoch_samples={self.epoch_samples} does not tile into {WINDOW}-sample windows; "
                "the CNN paths would not align")
        for name in ("ff_dim", "seq_len", "blocks_per_attention", "num_classes", "width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class MultiScaleCnn(Module):
    """Three parallel strided-conv paths fused by a 1x1 conv.

    Every conv is followed by LeakyReLU then batch norm.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.slope = cfg.leaky_slope
        self.samples = cfg.epoch_samples
        w = cfg.width
        self.convs: list[Conv1d] = []
        self.norms: list[BatchNorm1d] = []
        self.layout: list[int] = []
        for path in CNN_PATHS:
            c_in = 1
            for k, s in path:
                self.convs.append(Conv1d(c_in, w, k, s, rng))
                self.norms.append(BatchNorm1d(w, cfg.bn_momentum, cfg.norm_eps))
                c_in = w
            self.layout.append(len(path))
        self.fuse = Conv1d(w * len(CNN_PATHS), cfg.embed_dim, 1, 1, rng)
        self.fuse_norm = BatchNorm1d(cfg.embed_dim, cfg.bn_momentum, cfg.norm_eps)

    def _layer(self, i: int, x: Tensor) -> Tensor:
        return self.norms[i](ops.leaky_relu(self.convs[i](x), self.slope))

    def forward(self, x: Tensor) -> Tensor:
        """(B, T, 1) -> (B, T/50, E)."""
        if x.shape[-2] != self.samples or x.shape[-1] != 1:
            raise InputError(f"multi-scale CNN expects (..., {self.samples}, 1), got {x.shape}")
        outs = []
        i = 0
        for n in self.layout:
            h = x
            for _ in range(n):
                h = self._layer(i, h)
                i += 1
            outs.append(h)
        h = ops.concat(outs, axis=-1)
        return self.fuse_norm(ops.leaky_relu(self.fuse(h), self.slope))


class AttentionBlock(Module):
    """Multi-head self-attention, residual add, then layer norm (post-norm)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, eps: float = 1e-5):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm = LayerNorm(dim, eps)

    def forward(self, x: Tensor):
        a, weights = self.attn(x, x, x)
        return self.norm(ops.add(x, a)), weights


class AttentionStack(Module):
    def __init__(self, n: int, dim: int, heads: int, rng: np.random.Generator, eps: float = 1e-5):
        super().__init__()
        self.blocks = [AttentionBlock(dim, heads, rng, eps) for _ in range(n)]

    def forward(self, x: Tensor):
        weights = []
        for block in self.blocks:
            x, w = block(x)
            weights.append(w)
        return x, weights


class FeedForward(Module):
    """Position-wise E -> D_ff -> E with ReLU, residual add, then layer norm."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, eps: float = 1e-5):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.norm = LayerNorm(dim, eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(ops.add(x, self.fc2(ops.relu(self.fc1(x)))))


@dataclass
class EpochCache:
    """Post-attention representations of one batch of epochs.

    ``intra``: (B, M, 1 + windows, E) intra-modal block outputs, CLS_c first.
    ``cross``: (B, 1 + M, E) cross-modal block outputs, CLS_cross first.
    ``attention``: every internal attention-weight array (..., heads, S, S).
    """

    intra: np.ndarray
    cross: np.ndarray
    attention: list[np.ndarray]


@dataclass
class SequenceCache:
    """``intra`` (B, L, M, 1 + windows, E), ``cross`` (B, L, 1 + M, E),
    ``inter`` (B, L, E) inter-epoch block inputs (after positional encoding)."""

    intra: np.ndarray
    cross: np.ndarray
    inter: np.ndarray
    attention: list[np.ndarray]


def _broadcast_row(param: Parameter, batch: tuple[int, ...]) -> Tensor:
    """Repeat a (E,) parameter over leading batch dims, keeping it differentiable."""
    return ops.add(Tensor(np.zeros((*batch, param.shape[-1]), dtype=param.dtype)), param)


class EpochEncoder(Module):
    """Epoch-level block: per-modality CNN and intra-modal attention, then
    cross-modal attention.  Returns the CLS_cross representation."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        e = cfg.embed_dim
        self.cnns = [MultiScaleCnn(cfg, rng) for _ in cfg.modalities]
        self.cls = [Parameter(rng.normal(0.0, cfg.cls_init_std, e)) for _ in cfg.modalities]
        self.cls_cross = Parameter(rng.normal(0.0, cfg.cls_init_std, e))
        self.intra = [AttentionStack(cfg.blocks_per_attention, e, cfg.heads, rng, cfg.norm_eps)
                      for _ in cfg.modalities]
        self.cross = AttentionStack(cfg.blocks_per_attention, e, cfg.heads, rng, cfg.norm_eps)
        self._pe = ops.positional_encoding(cfg.windows + 1, e)

    def forward(self, x: Tensor) -> tuple[Tensor, EpochCache]:
        m_count = len(self.cfg.modalities)
        if x.ndim != 3 or x.shape[-1] != m_count:
            raise InputError(f"expected (B, {self.cfg.epoch_samples}, {m_count}) input, got {x.shape}")
        batch = x.shape[:1]
        pe = Tensor(self._pe.astype(x.dtype))
        cls_outs, intra_reprs, attn = [], [], []
        for m in range(m_count):
            feats = self.cnns[m](ops.getitem(x, (Ellipsis, slice(m, m + 1))))
            cls = ops.reshape(_broadcast_row(self.cls[m], batch), (*batch, 1, feats.shape[-1]))
            tokens = ops.add(ops.concat([cls, feats], axis=-2), pe)
            out, w = self.intra[m](tokens)
            attn.extend(w)
            intra_reprs.append(out.data)
            cls_outs.append(ops.getitem(out, (Ellipsis, 0, slice(None))))
        cross_in = ops.stack([_broadcast_row(self.cls_cross, batch)] + cls_outs, axis=-2)
        cross_out, w = self.cross(cross_in)
        attn.extend(w)
        cache = EpochCache(np.stack(intra_reprs, axis=1), cross_out.data, attn)
        return ops.getitem(cross_out, (Ellipsis, 0, slice(None))), cache


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


class EpochCmt(Module):
    """One-to-one classifier over a single 30 s epoch."""

    kind = "epoch"

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        self.encoder = EpochEncoder(self.cfg, rng)
        e = self.cfg.embed_dim
        self.ff = [FeedForward(e, self.cfg.ff_dim, rng, self.cfg.norm_eps) for _ in self.cfg.modalities]
        self.classifier = Linear(e * len(self.cfg.modalities), self.cfg.num_classes, rng)

    def forward(self, x) -> tuple[Tensor, EpochCache]:
        """(B, T, M) -> logits (B, classes); an unbatched (T, M) input gives (classes,)."""
        x = _as_input(x)
        single = x.ndim == 2
        if single:
            x = ops.reshape(x, (1, *x.shape))
        cross_cls, cache = self.encoder(x)
        # CLS_cross replaces each modality's CLS_c slot; the feed-forward is
        # position-wise and only that slot reaches the classifier, so it is
        # the only row evaluated.
        flat = ops.concat([ff(cross_cls) for ff in self.ff], axis=-1)
        logits = self.classifier(flat)
        if single:
            logits = ops.reshape(logits, (self.cfg.num_classes,))
        return logits, cache


class SequenceCmt(Module):
    """Many-to-many classifier over L consecutive epochs.

    With ``share_epoch_block`` False each sequence position owns its own
    epoch-level block.
    """

    kind = "sequence"

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        rng = np.random.default_rng(seed)
        n_blocks = 1 if self.cfg.share_epoch_block else self.cfg.seq_len
        self.epoch_blocks = [EpochEncoder(self.cfg, rng) for _ in range(n_blocks)]
        e = self.cfg.embed_dim
        self.inter = AttentionStack(self.cfg.blocks_per_attention, e, self.cfg.heads, rng, self.cfg.norm_eps)
        self.ff = FeedForward(e, self.cfg.ff_dim, rng, self.cfg.norm_eps)
        self.classifier = Linear(e, self.cfg.num_classes, rng)
        self._pe = ops.positional_encoding(self.cfg.seq_len, e)

    def forward(self, x) -> tuple[Tensor, SequenceCache]:
        """(B, L, T, M) -> logits (B, L, classes); unbatched (L, T, M) gives (L, classes)."""
        x = _as_input(x)
        single = x.ndim == 3
        if single:
            x = ops.reshape(x, (1, *x.shape))
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.seq_len:
            raise InputError(f"expected (B, {cfg.seq_len}, T, M) sequence input, got {x.shape}")
        b, l = x.shape[:2]
        if cfg.share_epoch_block:
            flat = ops.reshape(x, (b * l, *x.shape[2:]))
            cls, c = self.epoch_blocks[0](flat)
            reps = ops.reshape(cls, (b, l, cfg.embed_dim))
            intra = c.intra.reshape(b, l, *c.intra.shape[1:])
            cross = c.cross.reshape(b, l, *c.cross.shape[1:])
            attn = list(c.attention)
        else:
            outs, caches = [], []
            for pos in range(l):
                cls, c = self.epoch_blocks[pos](ops.getitem(x, (slice(None), pos)))
                outs.append(cls)
                caches.append(c)
            reps = ops.stack(outs, axis=1)
            intra = np.stack([c.intra for c in caches], axis=1)
            cross = np.stack([c.cross for c in caches], axis=1)
            attn = [a for c in caches for a in c.attention]
        if cfg.inter_epoch_pos_encoding:
            reps = ops.add(reps, Tensor(self._pe.astype(reps.dtype)))
        h, w = self.inter(reps)
        attn.extend(w)
        logits = self.classifier(self.ff(h))
        if single:
            logits = ops.reshape(logits, (l, cfg.num_classes))
        return logits, SequenceCache(intra, cross, reps.data, attn)


def param_count(model: Module) -> int:
    """Exact number of learnable scalars."""
    return int(sum(p.size for p in model.parameters()))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def window_coverage(n: int, length: int) -> np.ndarray:
    """How many stride-1 windows of ``length`` contain each of ``n`` positions."""
    pos = np.arange(n)
    return np.minimum.reduce([np.full(n, length), pos + 1, n - pos, np.full(n, n - length + 1)])


def predict_averaged(model: SequenceCmt, epochs: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Per-epoch class probabilities averaged over every stride-1 window.

    ``epochs`` is (N, T, M) for one recording with N >= L.  Each epoch's
    probability is the mean of the softmax outputs of all windows that
    contain it.
    """
    length = model.cfg.seq_len
    n = len(epochs)
    if n < length:
        raise InputError(f"recording has {n} epochs, fewer than sequence length {length}")
    was_training = model.training
    model.eval()
    try:
        total = np.zeros((n, model.cfg.num_classes), dtype=np.float64)
        starts = np.arange(n - length + 1)
        for i in range(0, len(starts), batch_size):
            chunk = starts[i:i + batch_size]
            x = np.stack([epochs[s:s + length] for s in chunk])
            logits, _ = model.forward(Tensor(x))
            probs = softmax_np(logits.data.astype(np.float64))
            for j, s in enumerate(chunk):
                total[s:s + length] += probs[j]
    finally:
        model.train(was_training)
    return total / window_coverage(n, length)[:, None]


def predict_epochs(model: EpochCmt, epochs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities (N, classes) from the epoch model, eval mode."""
    was_training = model.training
    model.eval()
    try:
        out = []
        for i in range(0, len(epochs), batch_size):
            logits, _ = model.forward(Tensor(np.asarray(epochs[i:i + batch_size])))
            out.append(softmax_np(logits.data.astype(np.float64)))
    finally:
        model.train(was_training)
    if not out:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(out)


def build_model(kind: str, cfg: ModelConfig, seed: int = 0) -> EpochCmt | SequenceCmt:
    if kind == "epoch":
        return EpochCmt(cfg, seed)
    if kind == "sequence":
        return SequenceCmt(cfg, seed)
    raise ConfigError(f"unknown model kind {kind!r} (expected 'epoch' or 'sequence')")
