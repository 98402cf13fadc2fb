"""Duration-explicit acoustic model over sliced visual-text tokens.

Stages: shared-weight conv feature extractor per token, self-attention
encoder, duration predictor, length regulation to frame rate, additive
256-dim event conditioning, self-attention decoder, and a linear mel head.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import (Tensor, gather, layer_norm, linear, softmax_last, take_rows,
                       zero_pad_middle, zero_pad_rows)
from .errors import DataError

EVENT_DIM = 256


class ShapeMismatch(ValueError):
    pass


class TooManyTokens(ValueError):
    pass


class TooManyFrames(ValueError):
    pass


class EmptyOutput(ValueError):
    """All predicted durations are zero; there is nothing to decode."""


class UnknownLabel(DataError):
    pass


class BadEmbeddingFile(DataError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    cell: tuple[int, int] = (24, 24)
    d_model: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    dp_hidden: int = 128
    conv_channels: tuple[int, int] = (8, 16)
    event_dim: int = EVENT_DIM
    n_mels: int = 80
    max_tokens: int = 256
    max_frames: int = 2048
    event_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        h, w = self.cell
        if h % 4 or w % 4:
            raise ValueError(f"cell sides must be divisible by 4, got {self.cell}")
        if self.event_dim != EVENT_DIM:
            raise ValueError(f"event features are {EVENT_DIM}-dimensional")
        for name in ("d_model", "d_ff", "dp_hidden", "n_mels", "max_tokens", "max_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def flat_visual_dim(self) -> int:
        h, w = self.cell
        return (h // 4) * (w // 4) * self.conv_channels[1]

    def to_dict(self) -> dict:
        return {"cell": list(self.cell), "d_model": self.d_model,
                "n_enc_layers": self.n_enc_layers, "n_dec_layers": self.n_dec_layers,
                "d_ff": self.d_ff, "dp_hidden": self.dp_hidden,
                "conv_channels": list(self.conv_channels), "event_dim": self.event_dim,
                "n_mels": self.n_mels, "max_tokens": self.max_tokens,
                "max_frames": self.max_frames, "event_labels": list(self.event_labels)}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(cell=tuple(d["cell"]), d_model=d["d_model"],
                           n_enc_layers=d["n_enc_layers"], n_dec_layers=d["n_dec_layers"],
                           d_ff=d["d_ff"], dp_hidden=d["dp_hidden"],
                           conv_channels=tuple(d["conv_channels"]), event_dim=d["event_dim"],
                           n_mels=d["n_mels"], max_tokens=d["max_tokens"],
                           max_frames=d["max_frames"],
                           event_labels=tuple(d["event_labels"]))


class ModelParams:
    """Named trainable tensors, flat-indexable for gradient checks."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def items(self):
        return self._tensors.items()

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])

    def flat_grad(self) -> np.ndarray:
        chunks = []
        for t in self._tensors.values():
            if t.grad is None:
                chunks.append(np.zeros(t.data.size, dtype=t.data.dtype))
            else:
                chunks.append(t.grad.reshape(-1))
        return np.concatenate(chunks)

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for t in self._tensors.values():
            n = t.data.size
            t.data = vec[pos:pos + n].reshape(t.data.shape).astype(t.data.dtype)
            pos += n
        if pos != len(vec):
            raise ShapeMismatch(f"flat vector has {len(vec)} entries, params need {pos}")

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(t.data.astype(dtype)) for k, t in self.items()})


def _xavier(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape).astype(dtype)


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = config.d_model
    c1, c2 = config.conv_channels
    t: dict[str, Tensor] = {}

    def mat(name, shape):
        t[name] = Tensor(_xavier(rng, shape, dtype))

    def vec(name, size, value=0.0):
        t[name] = Tensor(np.full(size, value, dtype=dtype))

    mat("fe.conv1.w", (9, c1)); vec("fe.conv1.b", c1)
    mat("fe.conv2.w", (9 * c1, c2)); vec("fe.conv2.b", c2)
    mat("fe.proj.w", (config.flat_visual_dim, d)); vec("fe.proj.b", d)

    def block(prefix):
        for wname in ("wq", "wk", "wv", "wo"):
            mat(f"{prefix}.attn.{wname}", (d, d))
        vec(f"{prefix}.ln1.g", d, 1.0); vec(f"{prefix}.ln1.b", d)
        mat(f"{prefix}.ffn.w1", (d, config.d_ff)); vec(f"{prefix}.ffn.b1", config.d_ff)
        mat(f"{prefix}.ffn.w2", (config.d_ff, d)); vec(f"{prefix}.ffn.b2", d)
        vec(f"{prefix}.ln2.g", d, 1.0); vec(f"{prefix}.ln2.b", d)

    for i in range(config.n_enc_layers):
        block(f"enc{i}")

    dp = config.dp_hidden
    mat("dp.conv1.w", (3 * d, dp)); vec("dp.conv1.b", dp)
    vec("dp.ln1.g", dp, 1.0); vec("dp.ln1.b", dp)
    mat("dp.conv2.w", (3 * dp, dp)); vec("dp.conv2.b", dp)
    vec("dp.ln2.g", dp, 1.0); vec("dp.ln2.b", dp)
    mat("dp.out.w", (dp, 1)); vec("dp.out.b", 1)

    # No bias here: conditioning must be purely additive, and a null event
    # must leave the decoder input untouched.
    mat("event.proj.w", (config.event_dim, d))
    if config.event_labels:
        t["event.embed"] = Tensor(
            rng.normal(0.0, 0.1, (len(config.event_labels), config.event_dim)).astype(dtype))

    for i in range(config.n_dec_layers):
        block(f"dec{i}")

    mat("mel.w", (d, config.n_mels)); vec("mel.b", config.n_mels)
    return ModelParams(t)


def sinusoidal_encoding(length: int, d_model: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor
                   ) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product self-attention; returns (out, weights)."""
    d = x.shape[-1]
    q = x @ wq
    k = x @ wk
    v = x @ wv
    weights = softmax_last((q @ k.T) * (1.0 / np.sqrt(d)))
    return (weights @ v) @ wo, weights


# ---------------------------------------------------------------------------
# Event features


@dataclass
class EventFeature:
    vector: np.ndarray
    source: str

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if self.vector.shape != (EVENT_DIM,):
            raise BadEmbeddingFile(f"event feature must have {EVENT_DIM} entries, "
                                   f"got {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise BadEmbeddingFile("event feature contains non-finite values")


def null_event_feature() -> EventFeature:
    return EventFeature(np.zeros(EVENT_DIM, dtype=np.float32), "null")


def load_embedding_file(path: str | Path) -> EventFeature:
    """Raw 256 x f32 little-endian vector, e.g. exported from any encoder."""
    data = Path(path).read_bytes()
    if len(data) != 4 * EVENT_DIM:
        raise BadEmbeddingFile(f"{path}: expected {4 * EVENT_DIM} bytes, got {len(data)}")
    return EventFeature(np.frombuffer(data, dtype="<f4").copy(), f"file:{path}")


def write_embedding_file(path: str | Path, vector: np.ndarray) -> None:
    vector = np.asarray(vector, dtype="<f4").reshape(-1)
    if vector.shape != (EVENT_DIM,):
        raise BadEmbeddingFile(f"embedding must have {EVENT_DIM} entries")
    Path(path).write_bytes(vector.tobytes())


def toy_image_embedding(image: np.ndarray, seed: int = 0) -> EventFeature:
    """Deterministic stand-in for a pretrained image encoder.

    Mean and variance of a 4x4 patch grid, pushed through a fixed,
    seed-derived random projection to 256 dims.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D grayscale image, got shape {image.shape}")
    stats = []
    for rows in np.array_split(image, 4, axis=0):
        for patch in np.array_split(rows, 4, axis=1):
            stats.append(patch.mean())
            stats.append(patch.var())
    stats = np.asarray(stats)
    proj = np.random.default_rng([seed]).normal(0.0, 1.0 / np.sqrt(len(stats)),
                                                (len(stats), EVENT_DIM))
    return EventFeature((stats @ proj).astype(np.float32), "toy_image_embedder")


# ---------------------------------------------------------------------------
# The model


@dataclass
class ForwardResult:
    mel: Tensor               # (T, n_mels)
    log_durations: Tensor     # (n,)
    durations: np.ndarray     # the durations actually used for regulation


class AcousticModel:
    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params
        self._pe = sinusoidal_encoding(max(config.max_tokens, config.max_frames),
                                       config.d_model)
        self._im2col_cache: dict[tuple, np.ndarray] = {}

    # -- visual feature extractor -------------------------------------------

    def _im2col_index(self, n: int, hp: int, wp: int, c: int) -> np.ndarray:
        key = (n, hp, wp, c)
        idx = self._im2col_cache.get(key)
        if idx is None:
            h, w = hp - 2, wp - 2
            oi, oj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            cells = []
            for di in range(3):
                for dj in range(3):
                    base = ((oi + di) * wp + (oj + dj)) * c
                    cells.append(base[..., None] + np.arange(c))
            per_item = np.concatenate(cells, axis=-1).reshape(h * w, 9 * c)
            offsets = (np.arange(n) * hp * wp * c)[:, None, None]
            idx = per_item[None, :, :] + offsets
            self._im2col_cache[key] = idx
        return idx

    def _conv3x3(self, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        n, h, w, c = x.shape
        padded = zero_pad_middle(x, 1)
        cols = gather(padded, self._im2col_index(n, h + 2, w + 2, c))
        out = linear(cols.reshape(n * h * w, 9 * c), weight, bias)
        return out.reshape(n, h, w, weight.shape[1])

    @staticmethod
    def _pool2x2(x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def extract_visual_features(self, tokens: np.ndarray) -> Tensor:
        """Per-token features via a shared conv/pool stack; (n, d_model)."""
        p = self.params
        tokens = np.asarray(tokens)
        h, w = self.config.cell
        if tokens.ndim != 3 or tokens.shape[1:] != (h, w):
            raise ShapeMismatch(f"expected (n, {h}, {w}) tokens, got {tokens.shape}")
        dtype = p["fe.conv1.w"].data.dtype
        x = Tensor(tokens.astype(dtype).reshape(*tokens.shape, 1))
        x = self._conv3x3(x, p["fe.conv1.w"], p["fe.conv1.b"]).relu()
        x = self._pool2x2(x)
        x = self._conv3x3(x, p["fe.conv2.w"], p["fe.conv2.b"]).relu()
        x = self._pool2x2(x)
        x = x.reshape(tokens.shape[0], self.config.flat_visual_dim)
        return linear(x, p["fe.proj.w"], p["fe.proj.b"])

    # -- encoder / decoder ---------------------------------------------------

    def _positional(self, n: int) -> Tensor:
        dtype = self.params["mel.w"].data.dtype
        return Tensor(self._pe[:n].astype(dtype))

    def _blocks(self, x: Tensor, prefix: str, n_layers: int) -> Tensor:
        p = self.params
        for i in range(n_layers):
            pre = f"{prefix}{i}"
            attn, _ = self_attention(x, p[f"{pre}.attn.wq"], p[f"{pre}.attn.wk"],
                                     p[f"{pre}.attn.wv"], p[f"{pre}.attn.wo"])
            x = layer_norm(x + attn, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            hidden = linear(x, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"]).relu()
            ff = linear(hidden, p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
            x = layer_norm(x + ff, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        return x

    def encode(self, features: Tensor) -> Tensor:
        n = features.shape[0]
        if n > self.config.max_tokens:
            raise TooManyTokens(f"{n} tokens > max_tokens {self.config.max_tokens}")
        x = features + self._positional(n)
        return self._blocks(x, "enc", self.config.n_enc_layers)

    def predict_durations(self, hidden: Tensor) -> Tensor:
        """Per-token log(frames + 1) regression head; (n,)."""
        p = self.params
        n = hidden.shape[0]
        idx = np.arange(n)[:, None] + np.arange(3)[None, :]
        x = take_rows(zero_pad_rows(hidden, 1, 1), idx).reshape(n, 3 * hidden.shape[1])
        x = linear(x, p["dp.conv1.w"], p["dp.conv1.b"]).relu()
        x = layer_norm(x, p["dp.ln1.g"], p["dp.ln1.b"])
        idx2 = np.arange(n)[:, None] + np.arange(3)[None, :]
        x = take_rows(zero_pad_rows(x, 1, 1), idx2).reshape(n, 3 * x.shape[1])
        x = linear(x, p["dp.conv2.w"], p["dp.conv2.b"]).relu()
        x = layer_norm(x, p["dp.ln2.g"], p["dp.ln2.b"])
        return linear(x, p["dp.out.w"], p["dp.out.b"]).reshape(n)

    def length_regulate(self, hidden: Tensor, durations: np.ndarray) -> Tensor:
        durations = np.asarray(durations, dtype=np.int64)
        if durations.ndim != 1 or durations.shape[0] != hidden.shape[0]:
            raise ShapeMismatch(f"durations {durations.shape} do not match "
                                f"{hidden.shape[0]} tokens")
        if (durations < 0).any():
            raise ValueError("durations must be nonnegative")
        total = int(durations.sum())
        if total == 0:
            raise EmptyOutput("all durations are zero")
        if total > self.config.max_frames:
            raise TooManyFrames(f"{total} frames > max_frames {self.config.max_frames}")
        return take_rows(hidden, np.repeat(np.arange(len(durations)), durations))

    def event_tensor(self, event) -> Tensor:
        """Resolve a label, EventFeature, or raw vector into a (256,) tensor.

        Label lookups go through the learned table, so they stay trainable.
        """
        if isinstance(event, str):
            if "event.embed" not in self.params:
                raise UnknownLabel("model has no label-embedding table")
            try:
                index = self.config.event_labels.index(event)
            except ValueError:
                raise UnknownLabel(f"label {event!r} not in "
                                   f"{list(self.config.event_labels)}") from None
            return take_rows(self.params["event.embed"],
                             np.array([index])).reshape(self.config.event_dim)
        if isinstance(event, EventFeature):
            vec = event.vector
        elif isinstance(event, Tensor):
            return event
        else:
            vec = np.asarray(event)
        if vec.shape != (self.config.event_dim,):
            raise ShapeMismatch(f"event vector shape {vec.shape}, "
                                f"expected ({self.config.event_dim},)")
        return Tensor(vec.astype(self.params["mel.w"].data.dtype))

    def decode(self, frames: Tensor, event) -> Tensor:
        """Add the projected event feature to every frame, then run the
        decoder blocks and the mel head."""
        t = frames.shape[0]
        if t > self.config.max_frames:
            raise TooManyFrames(f"{t} frames > max_frames {self.config.max_frames}")
        projected = self.event_tensor(event).reshape(1, self.config.event_dim) \
            @ self.params["event.proj.w"]
        x = frames + projected
        x = x + self._positional(t)
        x = self._blocks(x, "dec", self.config.n_dec_layers)
        return linear(x, self.params["mel.w"], self.params["mel.b"])

    # -- end to end -----------------------------------------------------------

    def infer_durations(self, log_durations: Tensor) -> np.ndarray:
        return np.maximum(0, np.rint(np.exp(log_durations.data) - 1.0)).astype(np.int64)

    def forward(self, tokens: np.ndarray, event,
                target_durations: np.ndarray | None = None) -> ForwardResult:
        """Full pipeline. Training passes target durations (teacher forcing);
        inference regulates with the predictor's own output."""
        features = self.extract_visual_features(tokens)
        hidden = self.encode(features)
        log_durations = self.predict_durations(hidden)
        if target_durations is not None:
            durations = np.asarray(target_durations, dtype=np.int64)
        else:
            durations = self.infer_durations(log_durations)
        frames = self.length_regulate(hidden, durations)
        mel = self.decode(frames, event)
        return ForwardResult(mel=mel, log_durations=log_durations, durations=durations)
