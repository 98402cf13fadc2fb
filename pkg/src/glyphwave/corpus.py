"""Corpus data model, manifest parsing, and a hermetic synthetic generator.

Manifest format (UTF-8, one record per line, tab-separated)::

    #sr=16000
    id<TAB>audio_path<TAB>event_label<TAB>confidence<TAB>text<TAB>alignment_path

Lines starting with ``#`` are comments; the ``#sr=<Hz>`` header declares the
corpus sample rate. The alignment column is optional. Paths are resolved
relative to the manifest's directory.

Alignment file format: one span per line, ``char<TAB>start_sec<TAB>end_sec``,
decimal seconds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import dsp
from .errors import DataError

logger = logging.getLogger(__name__)

CONFIDENCE_RANGE = (1, 5)
DEFAULT_SAMPLE_RATE = 16000


class ParseError(DataError):
    def __init__(self, path, line_no: int, field_name: str, message: str):
        super().__init__(f"{path}:{line_no}: field {field_name!r}: {message}")
        self.line_no = line_no
        self.field_name = field_name


class MissingFile(DataError):
    pass


class DuplicateId(DataError):
    pass


class EmptyCluster(ValueError):
    pass


class NonPositiveDuration(ValueError):
    pass


class EmptyText(ValueError):
    pass


class AlignSpan(NamedTuple):
    char: str
    start_sec: float
    end_sec: float


@dataclass(frozen=True)
class CharAlignment:
    """Per-character [start, end) time spans, sorted and non-overlapping."""

    spans: tuple[AlignSpan, ...]

    def __post_init__(self) -> None:
        prev_end = 0.0
        for span in self.spans:
            if len(span.char) != 1:
                raise ValueError(f"span char must be a single character, got {span.char!r}")
            if span.end_sec <= span.start_sec:
                raise ValueError(f"span {span} has end <= start")
            if span.start_sec < prev_end - 1e-9:
                raise ValueError(f"span {span} overlaps its predecessor")
            prev_end = span.end_sec

    @property
    def text(self) -> str:
        return "".join(s.char for s in self.spans)

    @property
    def end(self) -> float:
        return self.spans[-1].end_sec if self.spans else 0.0


@dataclass(frozen=True)
class OnomatopoeiaRecord:
    id: str
    text: str
    audio_path: Path
    event_label: str
    confidence: int
    alignment_path: Path | None = None

    def load_alignment(self) -> CharAlignment:
        """Parse and validate this record's alignment file against its text."""
        if self.alignment_path is None:
            raise MissingFile(f"record {self.id} has no alignment file")
        alignment = read_alignment(self.alignment_path)
        if alignment.text != self.text:
            raise DataError(f"record {self.id}: alignment text {alignment.text!r} "
                            f"!= record text {self.text!r}")
        return alignment


@dataclass(frozen=True)
class SoundEventCluster:
    label: str
    record_ids: tuple[str, ...]
    sounding_rate: float  # characters per second, mean over member records


@dataclass(frozen=True)
class CorpusManifest:
    records: tuple[OnomatopoeiaRecord, ...]
    clusters: dict[str, SoundEventCluster]
    sample_rate: int

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self, record_id: str) -> OnomatopoeiaRecord:
        for record in self.records:
            if record.id == record_id:
                return record
        raise KeyError(record_id)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(sorted(self.clusters))


# ---------------------------------------------------------------------------
# Parsing and writing


def read_alignment(path: str | Path) -> CharAlignment:
    spans = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(path, line_no, "span", f"expected 3 fields, got {len(parts)}")
        char, start_str, end_str = parts
        try:
            spans.append(AlignSpan(char, float(start_str), float(end_str)))
        except ValueError as exc:
            raise ParseError(path, line_no, "span", str(exc)) from exc
    try:
        return CharAlignment(tuple(spans))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_alignment(path: str | Path, alignment: CharAlignment) -> None:
    lines = [f"{s.char}\t{s.start_sec:.7f}\t{s.end_sec:.7f}" for s in alignment.spans]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _audio_duration(path: Path) -> float:
    samples, sr = _wav_header(path)
    if samples <= 0:
        raise NonPositiveDuration(f"{path}: zero-length audio cannot join a cluster")
    return samples / sr


def _wav_header(path: Path) -> tuple[int, int]:
    import wave as wave_module
    with wave_module.open(str(path), "rb") as w:
        return w.getnframes(), w.getframerate()


def load_manifest(path: str | Path) -> CorpusManifest:
    """Parse a manifest file, group records into clusters, and compute each
    cluster's sounding rate.

    Referenced audio and alignment files are checked for existence here;
    their contents are validated lazily on first use.

    Raises:
        ParseError: malformed line (reports line number and field).
        MissingFile: referenced audio/alignment file does not exist.
        DuplicateId: two records share an id.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"manifest not found: {path}")
    root = path.parent
    sample_rate = DEFAULT_SAMPLE_RATE
    records: list[OnomatopoeiaRecord] = []
    seen_ids: set[str] = set()

    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.startswith("#sr="):
            try:
                sample_rate = int(line[4:].strip())
            except ValueError as exc:
                raise ParseError(path, line_no, "sr", f"bad sample rate {line[4:]!r}") from exc
            continue
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (5, 6):
            raise ParseError(path, line_no, "record", f"expected 5 or 6 fields, got {len(parts)}")
        rec_id, audio_str, label, conf_str, text = parts[:5]
        align_str = parts[5] if len(parts) == 6 and parts[5] else None

        if not rec_id:
            raise ParseError(path, line_no, "id", "empty id")
        if rec_id in seen_ids:
            raise DuplicateId(f"{path}:{line_no}: duplicate record id {rec_id!r}")
        seen_ids.add(rec_id)
        if not label:
            raise ParseError(path, line_no, "event_label", "empty label")
        try:
            confidence = int(conf_str)
        except ValueError as exc:
            raise ParseError(path, line_no, "confidence", f"not an integer: {conf_str!r}") from exc
        if not (CONFIDENCE_RANGE[0] <= confidence <= CONFIDENCE_RANGE[1]):
            raise ParseError(path, line_no, "confidence",
                             f"{confidence} outside {CONFIDENCE_RANGE[0]}..{CONFIDENCE_RANGE[1]}")
        if not text:
            raise ParseError(path, line_no, "text", "empty text")
        if any(ch.isspace() for ch in text):
            raise ParseError(path, line_no, "text", f"whitespace inside text {text!r}")

        audio_path = (root / audio_str).resolve()
        if not audio_path.exists():
            raise MissingFile(f"{path}:{line_no}: audio file not found: {audio_path}")
        alignment_path = None
        if align_str is not None:
            alignment_path = (root / align_str).resolve()
            if not alignment_path.exists():
                raise MissingFile(f"{path}:{line_no}: alignment file not found: {alignment_path}")

        records.append(OnomatopoeiaRecord(id=rec_id, text=text, audio_path=audio_path,
                                          event_label=label, confidence=confidence,
                                          alignment_path=alignment_path))

    clusters = build_clusters(records)
    logger.info("loaded %d records in %d clusters from %s", len(records), len(clusters), path)
    return CorpusManifest(records=tuple(records), clusters=clusters, sample_rate=sample_rate)


def write_manifest(manifest: CorpusManifest, path: str | Path,
                   header_comments: Iterable[str] = ()) -> None:
    path = Path(path)
    root = path.parent.resolve()
    lines = [f"#sr={manifest.sample_rate}"]
    lines.extend(f"# {comment}" for comment in header_comments)
    for rec in manifest.records:
        fields = [rec.id,
                  _relpath(rec.audio_path, root),
                  rec.event_label,
                  str(rec.confidence),
                  rec.text]
        if rec.alignment_path is not None:
            fields.append(_relpath(rec.alignment_path, root))
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _relpath(target: Path, root: Path) -> str:
    import os
    return os.path.relpath(str(target), str(root))


def build_clusters(records: Iterable[OnomatopoeiaRecord]) -> dict[str, SoundEventCluster]:
    grouped: dict[str, list[OnomatopoeiaRecord]] = {}
    for rec in records:
        grouped.setdefault(rec.event_label, []).append(rec)
    clusters = {}
    for label in sorted(grouped):
        members = grouped[label]
        pairs = [(len(r.text), _audio_duration(r.audio_path)) for r in members]
        clusters[label] = SoundEventCluster(
            label=label,
            record_ids=tuple(r.id for r in members),
            sounding_rate=compute_sounding_rate(pairs),
        )
    return clusters


# ---------------------------------------------------------------------------
# Operations


def filter_by_confidence(manifest: CorpusManifest, min_score: int) -> CorpusManifest:
    """Keep records with confidence >= min_score; clusters are rebuilt."""
    if not (CONFIDENCE_RANGE[0] <= min_score <= CONFIDENCE_RANGE[1]):
        raise ValueError(f"min_score must lie in {CONFIDENCE_RANGE}, got {min_score}")
    kept = tuple(r for r in manifest.records if r.confidence >= min_score)
    return CorpusManifest(records=kept, clusters=build_clusters(kept),
                          sample_rate=manifest.sample_rate)


def compute_sounding_rate(members: Iterable[tuple[int, float]]) -> float:
    """Mean over member records of char_count / duration_sec."""
    members = list(members)
    if not members:
        raise EmptyCluster("sounding rate needs at least one member record")
    rates = []
    for char_count, duration in members:
        if duration <= 0.0:
            raise NonPositiveDuration(f"duration must be > 0, got {duration}")
        rates.append(char_count / duration)
    return float(np.mean(rates))


def uniform_alignment(text: str, duration_sec: float) -> CharAlignment:
    """Fallback alignment: n equal spans tiling [0, duration]."""
    if not text:
        raise EmptyText("cannot align empty text")
    if duration_sec <= 0.0:
        raise NonPositiveDuration(f"duration must be > 0, got {duration_sec}")
    n = len(text)
    spans = []
    for i, char in enumerate(text):
        start = duration_sec * i / n
        end = duration_sec if i == n - 1 else duration_sec * (i + 1) / n
        spans.append(AlignSpan(char, start, end))
    return CharAlignment(tuple(spans))


def load_record_audio(record: OnomatopoeiaRecord, manifest: CorpusManifest) -> np.ndarray:
    """Load and validate a record's waveform against the manifest sample rate
    and, when present, its alignment span bounds."""
    samples, sr = dsp.load_wav(record.audio_path)
    if sr != manifest.sample_rate:
        raise DataError(f"record {record.id}: sample rate {sr} != manifest "
                        f"{manifest.sample_rate}")
    if record.alignment_path is not None:
        alignment = record.load_alignment()
        duration = len(samples) / sr
        if alignment.end > duration + 1e-6:
            raise DataError(f"record {record.id}: alignment ends at {alignment.end:.6f}s "
                            f"but audio lasts {duration:.6f}s")
    return samples


# ---------------------------------------------------------------------------
# Synthetic micro-corpus generator


@dataclass(frozen=True)
class EventClassSpec:
    """One sound event class: a tone recipe plus a word template.

    The template is onset + run_char*L + coda, where the run length L tracks
    the sampled duration through `chars_per_sec`, so by construction the
    cluster's sounding rate matches the recipe.
    """

    label: str
    recipe: str                      # decay_sine | pure_tone | noise_burst | metal_ping
    base_freq: float
    onset: str
    run_char: str
    coda: str
    chars_per_sec: float = 4.0
    duration_range: tuple[float, float] = (0.9, 1.3)


@dataclass(frozen=True)
class GeneratorSpec:
    classes: tuple[EventClassSpec, ...]
    records_per_class: int = 25
    sample_rate: int = 16000
    # Verbosity knobs, imitating annotators describing one sound with more or
    # fewer characters. `length_jitter` decorrelates character count from
    # duration; the squeeze variants repeat text over unchanged audio.
    length_jitter: int = 0
    squeeze_word_prob: float = 0.0
    squeeze_word_copies: tuple[int, ...] = (2, 3)
    squeeze_word_max_chars: int = 5
    squeeze_run_prob: float = 0.0
    squeeze_run_lengths: tuple[int, ...] = (18, 22, 26)
    # Couples a per-record latent to both the audio tuning and the event
    # image, so image conditioning has signal to pick up.
    detune_strength: float = 0.0
    low_confidence_prob: float = 0.1
    image_size: int = 48


_CLASS_SHAPES = ("disk", "ring", "bar", "cross")


def default_classes() -> tuple[EventClassSpec, ...]:
    return (
        EventClassSpec("bell", "decay_sine", 880.0, "k", "o", "n"),
        EventClassSpec("whistle", "pure_tone", 1400.0, "p", "i", "h"),
        EventClassSpec("drum", "noise_burst", 300.0, "d", "a", "n"),
        EventClassSpec("bat", "metal_ping", 1100.0, "b", "i", "t"),
    )


def generator_spec_to_dict(spec: GeneratorSpec) -> dict:
    d = {k: getattr(spec, k) for k in spec.__dataclass_fields__ if k != "classes"}
    d["squeeze_word_copies"] = list(spec.squeeze_word_copies)
    d["squeeze_run_lengths"] = list(spec.squeeze_run_lengths)
    d["classes"] = [{**{k: getattr(c, k) for k in c.__dataclass_fields__},
                     "duration_range": list(c.duration_range)} for c in spec.classes]
    return d


def generator_spec_from_dict(d: dict) -> GeneratorSpec:
    classes = tuple(EventClassSpec(**{**c, "duration_range": tuple(c["duration_range"])})
                    for c in d["classes"])
    rest = {k: v for k, v in d.items() if k != "classes"}
    rest["squeeze_word_copies"] = tuple(rest.get("squeeze_word_copies", (2, 3, 4)))
    rest["squeeze_run_lengths"] = tuple(rest.get("squeeze_run_lengths", (8, 10, 12, 14)))
    return GeneratorSpec(classes=classes, **rest)


def repetition_classes() -> tuple[EventClassSpec, ...]:
    """Word lengths spread from ~4 to ~10 characters.

    Repetition training needs augmented variants to cover the whole length
    range the evaluation grids probe; varied base lengths provide that.
    """
    return (
        EventClassSpec("bell", "decay_sine", 880.0, "k", "o", "n",
                       chars_per_sec=4.0, duration_range=(0.85, 1.15)),
        EventClassSpec("drum", "noise_burst", 300.0, "d", "a", "n",
                       chars_per_sec=5.0, duration_range=(0.85, 1.15)),
        EventClassSpec("bat", "metal_ping", 1100.0, "b", "i", "t",
                       chars_per_sec=6.5, duration_range=(0.85, 1.15)),
        EventClassSpec("whistle", "pure_tone", 1400.0, "p", "e", "h",
                       chars_per_sec=8.0, duration_range=(0.85, 1.15)),
        EventClassSpec("snore", "noise_burst", 150.0, "s", "z", "u",
                       chars_per_sec=11.0, duration_range=(0.85, 1.15)),
    )


def preset_spec(name: str, records_per_class: int = 50) -> GeneratorSpec:
    """Named generator presets for the bundled experiments."""
    classes = default_classes()
    if name == "basic":
        return GeneratorSpec(classes=classes, records_per_class=records_per_class)
    if name == "stretch":
        wide = tuple(replace(c, duration_range=(0.55 * c.duration_range[0],
                                                2.1 * c.duration_range[1]))
                     for c in classes)
        return GeneratorSpec(classes=wide, records_per_class=records_per_class)
    if name == "repetition":
        return GeneratorSpec(classes=repetition_classes(),
                             records_per_class=records_per_class,
                             length_jitter=3)
    if name == "repetition-eval":
        return GeneratorSpec(classes=repetition_classes(),
                             records_per_class=records_per_class,
                             length_jitter=3)
    if name == "diversity":
        return GeneratorSpec(classes=classes, records_per_class=records_per_class,
                             detune_strength=0.3)
    raise ValueError(f"unknown preset {name!r}; "
                     f"expected basic|stretch|repetition|repetition-eval|diversity")


def _char_freq_factor(char: str) -> float:
    return 1.0 + 0.1 * ((ord(char) * 7919) % 6)


def _segment_wave(recipe: str, freq: float, n: int, sr: int,
                  rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    seg_dur = max(n / sr, 1e-6)
    if recipe == "decay_sine":
        body = np.sin(2 * np.pi * freq * t) * (0.3 + 0.7 * np.exp(-2.5 * t / seg_dur))
    elif recipe == "pure_tone":
        body = np.sin(2 * np.pi * freq * t)
    elif recipe == "noise_burst":
        noise = rng.uniform(-1.0, 1.0, n)
        # Cheap low-pass for a thumpier color.
        body = np.convolve(noise, np.ones(8) / 8.0, mode="same")
        body += 0.4 * np.sin(2 * np.pi * freq * t)
    elif recipe == "metal_ping":
        body = (0.6 * np.sin(2 * np.pi * freq * t)
                + 0.4 * np.sin(2 * np.pi * 2.76 * freq * t))
        body *= 0.35 + 0.65 * np.exp(-2.0 * t / seg_dur)
    else:
        raise ValueError(f"unknown recipe {recipe!r}")
    ramp = max(2, min(int(0.005 * sr), n // 4))
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return 0.45 * body * env


def _event_image(shape: str, size: int, latent: float,
                 rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float64)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - c, xx - c)
    scale = 0.22 + 0.16 * (latent + 1.0)            # latent in [-1, 1]
    brightness = min(1.0, 0.55 + 0.2 * latent)
    radius = scale * size
    if shape == "disk":
        img[r <= radius] = brightness
    elif shape == "ring":
        img[(r <= radius) & (r >= radius * 0.55)] = brightness
    elif shape == "bar":
        half = max(1, int(radius * 0.5))
        img[int(c) - half:int(c) + half, :] = brightness
    elif shape == "cross":
        half = max(1, int(radius * 0.4))
        img[int(c) - half:int(c) + half, :] = brightness
        img[:, int(c) - half:int(c) + half] = brightness
    img += rng.normal(0.0, 0.04, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_corpus(spec: GeneratorSpec, out_dir: str | Path,
                              seed: int) -> CorpusManifest:
    """Write a deterministic corpus (WAVs, alignments, event images, manifest).

    Identical (spec, seed) pairs produce byte-identical trees. Alignments are
    exact by construction: the audio is a concatenation of per-character
    segments.
    """
    out_dir = Path(out_dir)
    for sub in ("wavs", "align", "images"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    sr = spec.sample_rate
    records = []

    for ci, cls in enumerate(spec.classes):
        shape = _CLASS_SHAPES[ci % len(_CLASS_SHAPES)]
        for ri in range(spec.records_per_class):
            rng = np.random.default_rng([seed, ci, ri])
            rec_id = f"{cls.label}{ri:03d}"
            duration = rng.uniform(*cls.duration_range)
            n_chars = int(round(cls.chars_per_sec * duration))
            if spec.length_jitter:
                n_chars += int(rng.integers(-spec.length_jitter,
                                            spec.length_jitter + 1))
            n_chars = max(len(cls.onset) + 1 + len(cls.coda), n_chars)
            run_len = n_chars - len(cls.onset) - len(cls.coda)
            word = cls.onset + cls.run_char * run_len + cls.coda

            u = rng.uniform()
            if u < spec.squeeze_word_prob and len(word) <= spec.squeeze_word_max_chars:
                copies = int(rng.choice(spec.squeeze_word_copies))
                text = word * copies
            elif u < spec.squeeze_word_prob + spec.squeeze_run_prob:
                long_run = int(rng.choice(spec.squeeze_run_lengths))
                text = cls.onset + cls.run_char * long_run + cls.coda
            else:
                text = word

            latent = rng.uniform(-1.0, 1.0)
            detune = 2.0 ** (latent * spec.detune_strength)

            total_samples = int(round(duration * sr))
            n = len(text)
            bounds = [int(round(total_samples * i / n)) for i in range(n + 1)]
            pieces = []
            spans = []
            for i, char in enumerate(text):
                seg_n = bounds[i + 1] - bounds[i]
                freq = cls.base_freq * _char_freq_factor(char) * detune
                pieces.append(_segment_wave(cls.recipe, freq, seg_n, sr, rng))
                spans.append(AlignSpan(char, bounds[i] / sr, bounds[i + 1] / sr))
            wave = np.concatenate(pieces)

            if rng.uniform() < spec.low_confidence_prob:
                confidence = int(rng.integers(1, 3))
            else:
                confidence = int(rng.integers(3, 6))

            wav_path = out_dir / "wavs" / f"{rec_id}.wav"
            align_path = out_dir / "align" / f"{rec_id}.align"
            image_path = out_dir / "images" / f"{rec_id}.pgm"
            dsp.write_wav(wav_path, wave, sr)
            write_alignment(align_path, CharAlignment(tuple(spans)))
            from .visualtext import write_pgm
            write_pgm(image_path, _event_image(shape, spec.image_size, latent, rng))

            records.append(OnomatopoeiaRecord(
                id=rec_id, text=text, audio_path=wav_path.resolve(),
                event_label=cls.label, confidence=confidence,
                alignment_path=align_path.resolve()))

    manifest = CorpusManifest(records=tuple(records),
                              clusters=build_clusters(records), sample_rate=sr)
    write_manifest(manifest, out_dir / "manifest.tsv",
                   header_comments=[f"synthetic corpus seed={seed}"])
    return manifest


def event_image_path(manifest_path_or_dir: str | Path, record_id: str) -> Path:
    """Images live next to the manifest under images/<record_id>.pgm."""
    root = Path(manifest_path_or_dir)
    if root.is_file():
        root = root.parent
    return root / "images" / f"{record_id}.pgm"
