"""Losses, Adam, the training loop, checkpoint I/O, and end-to-end synthesis."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dsp
from .autodiff import Tensor
from .corpus import CorpusManifest, filter_by_confidence, uniform_alignment
from .corpus import load_record_audio
from .errors import DataError, NumericError
from .model import (AcousticModel, ModelConfig, ModelParams, ShapeMismatch,
                    UnknownLabel, init_params, null_event_feature, toy_image_embedding)
from .visualtext import (ProceduralGlyphs, pad_to_canvas, read_pgm,
                         remap_alignment_to_tokens, render_visual_text, slice_into_tokens,
                         stretch_by_ratio, stretch_to_duration)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GWCKPT1\n"
METRICS_HEADER = "epoch,mel_mse,duration_mse,total,val_total"


class NonFiniteLoss(NumericError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    grad_clip: float | None = 1.0
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything between a manifest record and a model batch item."""

    dsp: dsp.DspConfig = field(default_factory=dsp.DspConfig)
    stretch_mode: str = "none"          # none | duration
    event_source: str = "label"         # label | images | null
    images_dir: str | None = None       # default: images/ next to the manifest
    min_confidence: int = 3
    glyph_seed: int = 0
    embedder_seed: int = 0
    allow_uniform_alignment: bool = False

    def __post_init__(self) -> None:
        if self.stretch_mode not in ("none", "duration"):
            raise ValueError(f"stretch_mode must be none|duration, got {self.stretch_mode}")
        if self.event_source not in ("label", "images", "null"):
            raise ValueError(f"event_source must be label|images|null, "
                             f"got {self.event_source}")


@dataclass
class LossBreakdown:
    mel_mse: float
    duration_mse: float

    @property
    def total(self) -> float:
        return self.mel_mse + self.duration_mse


def _masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray | None) -> Tensor:
    diff = pred - Tensor(target.astype(pred.data.dtype))
    sq = diff * diff
    if mask is None:
        return sq.mean()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != pred.shape[0]:
        raise ShapeMismatch(f"mask length {mask.shape[0]} != {pred.shape[0]}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("mask excludes everything")
    weights = mask.astype(pred.data.dtype)
    if sq.ndim == 2:
        weights = weights[:, None]
        count *= pred.shape[1]
    return (sq * Tensor(weights)).sum() * (1.0 / count)


def compute_loss(pred_mel: Tensor, target_mel: np.ndarray, pred_logdur: Tensor,
                 target_durations: np.ndarray, mel_mask: np.ndarray | None = None,
                 dur_mask: np.ndarray | None = None) -> tuple[Tensor, LossBreakdown]:
    """Masked mel MSE plus masked log-duration MSE (teacher-forced shapes)."""
    if pred_mel.shape != tuple(np.shape(target_mel)):
        raise ShapeMismatch(f"mel {pred_mel.shape} vs target {np.shape(target_mel)}")
    if pred_logdur.shape != tuple(np.shape(target_durations)):
        raise ShapeMismatch(f"durations {pred_logdur.shape} vs "
                            f"target {np.shape(target_durations)}")
    target_logdur = np.log(np.asarray(target_durations, dtype=np.float64) + 1.0)
    mel_term = _masked_mse(pred_mel, np.asarray(target_mel), mel_mask)
    dur_term = _masked_mse(pred_logdur, target_logdur, dur_mask)
    total = mel_term + dur_term
    return total, LossBreakdown(float(mel_term.data), float(dur_term.data))


class Adam:
    """Adam over a ModelParams container, with optional global-norm clipping."""

    def __init__(self, params: ModelParams, config: TrainConfig):
        self.params = params
        self.config = config
        self.t = 0
        self.last_clipped_norm = 0.0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, scale: float = 1.0) -> float:
        """Apply one update from accumulated grads; returns pre-clip norm."""
        cfg = self.config
        grads = {}
        sq_sum = 0.0
        for name, tensor in self.params.items():
            g = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad * scale
            grads[name] = g
            sq_sum += float((g.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(sq_sum))
        clip = 1.0
        if cfg.grad_clip is not None and norm > cfg.grad_clip:
            clip = cfg.grad_clip / norm
        self.last_clipped_norm = norm * clip
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, tensor in self.params.items():
            g = grads[name] * clip
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (cfg.learning_rate * (m / bc1)
                      / (np.sqrt(v / bc2) + cfg.adam_eps))
            tensor.data = tensor.data - update.astype(tensor.data.dtype)
        return norm


# ---------------------------------------------------------------------------
# Dataset preparation


@dataclass
class DatasetItem:
    record_id: str
    tokens: np.ndarray          # (n, h, w)
    durations: np.ndarray       # (n,) target frame counts
    mel: np.ndarray             # (T, n_mels)
    event: object               # label str, EventFeature, or None


def prepare_dataset(manifest: CorpusManifest, model_config: ModelConfig,
                    pipeline: PipelineConfig) -> list[DatasetItem]:
    """Render, stretch, slice, and analyze every record into a model item."""
    cell_h, cell_w = model_config.cell
    glyphs = ProceduralGlyphs(model_config.cell, pipeline.glyph_seed)
    items = []
    for rec in manifest.records:
        wave = load_record_audio(rec, manifest)
        duration_sec = len(wave) / manifest.sample_rate
        if rec.alignment_path is not None:
            alignment = rec.load_alignment()
        elif pipeline.allow_uniform_alignment:
            alignment = uniform_alignment(rec.text, duration_sec)
        else:
            raise DataError(f"record {rec.id} has no alignment "
                            f"(and uniform fallback is disabled)")

        mel = dsp.mel_spectrogram(wave, pipeline.dsp)
        visual = render_visual_text(rec.text, glyphs)
        if pipeline.stretch_mode == "duration":
            rate = manifest.clusters[rec.event_label].sounding_rate
            visual = stretch_to_duration(visual, rate, duration_sec, cell_w)
        token_list = slice_into_tokens(visual, cell_w)
        if len(token_list) > model_config.max_tokens:
            raise DataError(f"record {rec.id}: {len(token_list)} tokens exceed "
                            f"max_tokens {model_config.max_tokens}")
        if mel.n_frames > model_config.max_frames:
            raise DataError(f"record {rec.id}: {mel.n_frames} frames exceed "
                            f"max_frames {model_config.max_frames}")
        tokens = np.stack([t.pixels for t in token_list]).astype(np.float32)
        durations = remap_alignment_to_tokens(alignment, visual, cell_w, mel.n_frames)

        if pipeline.event_source == "label":
            event = rec.event_label
        elif pipeline.event_source == "images":
            images_dir = Path(pipeline.images_dir) if pipeline.images_dir else None
            image_path = (images_dir or Path(rec.audio_path).parent.parent / "images")
            image_path = image_path / f"{rec.id}.pgm"
            if not image_path.exists():
                raise DataError(f"record {rec.id}: event image not found: {image_path}")
            event = toy_image_embedding(read_pgm(image_path), pipeline.embedder_seed)
        else:
            event = null_event_feature()
        items.append(DatasetItem(rec.id, tokens, durations, mel.frames, event))
    return items


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    params: ModelParams
    model_config: ModelConfig
    meta: dict

    def model(self) -> AcousticModel:
        return AcousticModel(self.model_config, self.params)

    @property
    def dsp_config(self) -> dsp.DspConfig:
        return dsp.DspConfig.from_dict(self.meta["dsp"])


def save_checkpoint(path: str | Path, params: ModelParams, model_config: ModelConfig,
                    meta: dict) -> None:
    header = {"model_config": model_config.to_dict(), "meta": meta,
              "tensors": [{"name": n, "shape": list(t.shape)} for n, t in params.items()]}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, tensor in params.items():
            f.write(tensor.data.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (blob_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    header = json.loads(raw[offset:offset + blob_len].decode("utf-8"))
    offset += blob_len
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[entry["name"]] = Tensor(data.reshape(shape).astype(np.float32))
    return Checkpoint(params=ModelParams(tensors),
                      model_config=ModelConfig.from_dict(header["model_config"]),
                      meta=header["meta"])


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    checkpoint_path: Path
    best_checkpoint_path: Path
    metrics_path: Path
    metrics: list[dict]


def _item_loss(model: AcousticModel, item: DatasetItem) -> tuple[Tensor, LossBreakdown]:
    result = model.forward(item.tokens, item.event, target_durations=item.durations)
    return compute_loss(result.mel, item.mel, result.log_durations, item.durations)


def train(manifest: CorpusManifest, model_config: ModelConfig,
          pipeline: PipelineConfig, config: TrainConfig,
          out_dir: str | Path) -> TrainResult:
    """Train on a manifest; deterministic given the config seed.

    Writes `metrics.csv` plus `last.ckpt` every epoch and `best.ckpt`
    whenever the validation loss improves.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    filtered = filter_by_confidence(manifest, pipeline.min_confidence)
    if not filtered.records:
        raise DataError(f"no records left at confidence >= {pipeline.min_confidence}")

    if pipeline.event_source == "label":
        model_config = replace(model_config, event_labels=filtered.labels)
    else:
        model_config = replace(model_config, event_labels=())

    items = prepare_dataset(filtered, model_config, pipeline)
    split_rng = np.random.default_rng([config.seed, 0])
    order = split_rng.permutation(len(items))
    n_val = int(round(config.val_fraction * len(items)))
    n_val = min(n_val, len(items) - 1)
    val_items = [items[i] for i in order[:n_val]]
    train_items = [items[i] for i in order[n_val:]]

    params = init_params(model_config, config.seed)
    model = AcousticModel(model_config, params)
    optimizer = Adam(params, config)
    meta = {
        "dsp": pipeline.dsp.to_dict(),
        "stretch_mode": pipeline.stretch_mode,
        "event_source": pipeline.event_source,
        "glyph_seed": pipeline.glyph_seed,
        "embedder_seed": pipeline.embedder_seed,
        "sample_rate": filtered.sample_rate,
        "cluster_rates": {label: c.sounding_rate for label, c in filtered.clusters.items()},
        "seed": config.seed,
    }

    epoch_rng = np.random.default_rng([config.seed, 1])
    metrics = []
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text(METRICS_HEADER + "\n", encoding="utf-8")
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"
    best_val = np.inf

    for epoch in range(config.epochs):
        perm = epoch_rng.permutation(len(train_items))
        sums = np.zeros(2)
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start:start + config.batch_size]
            params.zero_grads()
            for idx in batch:
                item = train_items[idx]
                loss, breakdown = _item_loss(model, item)
                if not np.isfinite(breakdown.total):
                    raise NonFiniteLoss(f"epoch {epoch}, record {item.record_id}: "
                                        f"loss {breakdown.total}")
                loss.backward()
                sums += (breakdown.mel_mse, breakdown.duration_mse)
            optimizer.step(scale=1.0 / len(batch))
        n = max(1, len(train_items))
        train_mel, train_dur = sums / n

        if val_items:
            val_total = 0.0
            for item in val_items:
                _, breakdown = _item_loss(model, item)
                val_total += breakdown.total
            val_total /= len(val_items)
        else:
            val_total = train_mel + train_dur

        row = {"epoch": epoch, "mel_mse": train_mel, "duration_mse": train_dur,
               "total": train_mel + train_dur, "val_total": val_total}
        metrics.append(row)
        with open(metrics_path, "a", encoding="utf-8") as f:
            f.write(f"{epoch},{train_mel:.10g},{train_dur:.10g},"
                    f"{train_mel + train_dur:.10g},{val_total:.10g}\n")
        save_checkpoint(last_path, params, model_config, meta)
        if val_total < best_val:
            best_val = val_total
            save_checkpoint(best_path, params, model_config, meta)
        logger.info("epoch %d: mel=%.5f dur=%.5f val=%.5f", epoch, train_mel,
                    train_dur, val_total)

    return TrainResult(checkpoint_path=last_path, best_checkpoint_path=best_path,
                       metrics_path=metrics_path, metrics=metrics)


# ---------------------------------------------------------------------------
# Synthesis


@dataclass
class SynthResult:
    waveform: np.ndarray | None
    mel: dsp.MelSpectrogram
    durations: np.ndarray
    sample_rate: int
    visual_width: int


def synthesize(checkpoint: Checkpoint, text: str, stretch: tuple | None = None,
               event=None, rate_label: str | None = None,
               vocoder: bool = True) -> SynthResult:
    """Render -> stretch -> pad -> slice -> forward -> Griffin-Lim.

    `stretch` is None, ("ratio", r), or ("duration", seconds); the latter
    needs a cluster label (explicit `rate_label`, or the label used as
    `event`) to look up the sounding rate stored in the checkpoint.
    """
    config = checkpoint.model_config
    model = checkpoint.model()
    cell_h, cell_w = config.cell
    glyphs = ProceduralGlyphs(config.cell, checkpoint.meta.get("glyph_seed", 0))
    visual = render_visual_text(text, glyphs)

    if stretch is not None:
        kind, value = stretch
        if kind == "ratio":
            visual = stretch_by_ratio(visual, float(value))
        elif kind == "duration":
            label = rate_label or (event if isinstance(event, str) else None)
            rates = checkpoint.meta.get("cluster_rates", {})
            if label is None or label not in rates:
                raise UnknownLabel(f"no sounding rate for label {label!r} in checkpoint")
            visual = stretch_to_duration(visual, rates[label], float(value), cell_w)
        else:
            raise ValueError(f"unknown stretch kind {kind!r}")

    width = visual.text_width
    canvas = -(-width // cell_w) * cell_w
    visual = pad_to_canvas(visual, canvas)
    token_list = slice_into_tokens(visual, cell_w)
    tokens = np.stack([t.pixels for t in token_list]).astype(np.float32)

    if event is None:
        event = null_event_feature()
    result = model.forward(tokens, event)

    dsp_config = checkpoint.dsp_config
    mel = dsp.MelSpectrogram(result.mel.data.astype(np.float32), dsp_config)
    waveform = None
    if vocoder:
        waveform = dsp.griffin_lim(mel)
        peak = float(np.max(np.abs(waveform))) if len(waveform) else 0.0
        if peak > 0.0:
            waveform = waveform * (0.9 / max(peak, 0.9))
    return SynthResult(waveform=waveform, mel=mel, durations=result.durations,
                       sample_rate=dsp_config.sample_rate, visual_width=width)


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_sampled: int
    n_params: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _gradcheck_batch(config: ModelConfig, rng: np.random.Generator):
    h, w = config.cell
    tokens = rng.random((3, h, w))
    durations = np.array([2, 1, 2])
    target_mel = rng.normal(0.0, 1.0, (int(durations.sum()), config.n_mels))
    event = rng.normal(0.0, 0.5, config.event_dim)
    return tokens, durations, target_mel, event


def gradient_check(config: ModelConfig | None = None, n_samples: int = 100,
                   eps: float = 1e-4, seed: int = 0,
                   tolerance: float = 1e-4) -> GradCheckReport:
    """Compare composed-model analytic gradients against central differences.

    Runs the whole forward (all stages, teacher-forced) in float64 and checks
    `n_samples` randomly chosen parameters. The error is
    |analytic - numeric| / (1 + |numeric|).
    """
    if config is None:
        config = ModelConfig(d_model=24, d_ff=32, dp_hidden=16, conv_channels=(4, 6),
                             n_mels=12, event_labels=("a", "b"))
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, dtype=np.float64)
    model = AcousticModel(config, params)
    tokens, durations, target_mel, event = _gradcheck_batch(config, rng)
    # Use the label path so the embedding table is part of the graph.
    event_input = config.event_labels[0] if config.event_labels else event

    def loss_value() -> float:
        result = model.forward(tokens, event_input, target_durations=durations)
        loss, _ = compute_loss(result.mel, target_mel, result.log_durations, durations)
        return float(loss.data)

    params.zero_grads()
    result = model.forward(tokens, event_input, target_durations=durations)
    loss, _ = compute_loss(result.mel, target_mel, result.log_durations, durations)
    loss.backward()
    analytic = params.flat_grad()

    theta = params.flat()
    indices = rng.choice(len(theta), size=min(n_samples, len(theta)), replace=False)
    max_err = 0.0
    for i in indices:
        saved = theta[i]
        theta[i] = saved + eps
        params.set_flat(theta)
        up = loss_value()
        theta[i] = saved - eps
        params.set_flat(theta)
        down = loss_value()
        theta[i] = saved
        params.set_flat(theta)
        numeric = (up - down) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / (1.0 + abs(numeric))
        max_err = max(max_err, err)
    return GradCheckReport(max_rel_error=max_err, n_sampled=len(indices),
                           n_params=len(theta), tolerance=tolerance)
