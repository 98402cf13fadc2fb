"""Repetition-based augmentation of (text, waveform, alignment) triples.

Word-level: the whole waveform is duplicated and concatenated. Character
level: the middle occurrence of a repeated-character run is found, and its
waveform segment is duplicated in place right after itself. All sample
arithmetic is exact; nothing is resampled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import (AlignSpan, CharAlignment, CorpusManifest, build_clusters,
                     load_record_audio, write_alignment, write_manifest)
from .errors import DataError

logger = logging.getLogger(__name__)


class RunNotFound(ValueError):
    pass


class NoAlignment(DataError):
    pass


@dataclass(frozen=True)
class CharRun:
    """A maximal run of one repeated character."""

    char: str
    start_index: int
    length: int


def find_char_runs(text: str, min_len: int = 3) -> list[CharRun]:
    """All maximal runs of identical characters with length >= min_len."""
    runs = []
    i = 0
    while i < len(text):
        j = i
        while j < len(text) and text[j] == text[i]:
            j += 1
        if j - i >= min_len:
            runs.append(CharRun(text[i], i, j - i))
        i = j
    return runs


def repeat_word(text: str, wave: np.ndarray, alignment: CharAlignment, k: int,
                sample_rate: int) -> tuple[str, np.ndarray, CharAlignment]:
    """Repeat the whole word k extra times; output length is exactly (k+1)*L."""
    if k < 0:
        raise ValueError("repeat count must be >= 0")
    if k == 0:
        return text, wave, alignment
    if alignment is None:
        raise NoAlignment("word repetition needs an alignment to offset")
    offset = len(wave) / sample_rate
    spans = []
    for copy in range(k + 1):
        shift = copy * offset
        spans.extend(AlignSpan(s.char, s.start_sec + shift, s.end_sec + shift)
                     for s in alignment.spans)
    return text * (k + 1), np.tile(wave, k + 1), CharAlignment(tuple(spans))


def repeat_char(text: str, wave: np.ndarray, alignment: CharAlignment, run: CharRun,
                r: int, sample_rate: int, crossfade_ms: float = 0.0
                ) -> tuple[str, np.ndarray, CharAlignment]:
    """Insert r copies of the run's middle-occurrence segment after itself.

    The middle occurrence is index start + floor(length/2) within the run.
    Output length is exactly L + r * segment_samples. With crossfade_ms > 0 a
    linear blend smooths each copy boundary in place (length unchanged, but
    samples are no longer bit-copies).
    """
    if r < 0:
        raise ValueError("insert count must be >= 0")
    if alignment is None:
        raise NoAlignment("character repetition needs an alignment")
    end = run.start_index + run.length
    if (end > len(text)
            or text[run.start_index:end] != run.char * run.length):
        raise RunNotFound(f"run {run} not present in text {text!r}")
    if r == 0:
        return text, wave, alignment

    mid = run.start_index + run.length // 2
    span = alignment.spans[mid]
    a = int(round(span.start_sec * sample_rate))
    b = int(round(span.end_sec * sample_rate))
    if b <= a:
        raise RunNotFound(f"middle span of {run} maps to an empty segment")
    segment = wave[a:b]
    seg_dur = (b - a) / sample_rate

    new_wave = np.concatenate([wave[:b], np.tile(segment, r), wave[b:]])
    if crossfade_ms > 0.0:
        new_wave = _crossfade_boundaries(new_wave, b, b - a, r, sample_rate, crossfade_ms)

    new_text = text[:mid + 1] + run.char * r + text[mid + 1:]
    spans = list(alignment.spans[:mid + 1])
    insert_at = span.end_sec
    for j in range(r):
        spans.append(AlignSpan(run.char, insert_at + j * seg_dur, insert_at + (j + 1) * seg_dur))
    shift = r * seg_dur
    spans.extend(AlignSpan(s.char, s.start_sec + shift, s.end_sec + shift)
                 for s in alignment.spans[mid + 1:])
    return new_text, new_wave, CharAlignment(tuple(spans))


def _crossfade_boundaries(wave: np.ndarray, first_copy_start: int, seg_len: int,
                          r: int, sample_rate: int, crossfade_ms: float) -> np.ndarray:
    fade = min(int(sample_rate * crossfade_ms / 1000.0), seg_len // 2)
    if fade < 2:
        return wave
    out = wave.astype(np.float64)
    ramp = np.linspace(0.0, 1.0, fade)
    for j in range(r + 1):
        pos = first_copy_start + j * seg_len
        if pos + fade > len(out) or pos - fade < 0:
            continue
        tail = out[pos - fade:pos].copy()
        out[pos:pos + fade] = out[pos:pos + fade] * ramp + tail * (1.0 - ramp)
    if np.issubdtype(wave.dtype, np.integer):
        return np.clip(np.rint(out), -32768, 32767).astype(wave.dtype)
    return out


def select_augmentable_chars(texts, coverage: float = 0.9, min_len: int = 3) -> list[str]:
    """Characters ranked by how much run mass they carry, cut at `coverage`.

    Mass is the total number of characters appearing inside runs of at least
    `min_len`. Ties break by ascending codepoint.
    """
    if not (0.0 < coverage <= 1.0):
        raise ValueError(f"coverage must lie in (0, 1], got {coverage}")
    mass: dict[str, int] = {}
    for text in texts:
        for run in find_char_runs(text, min_len):
            mass[run.char] = mass.get(run.char, 0) + run.length
    if not mass:
        return []
    ranked = sorted(mass.items(), key=lambda kv: (-kv[1], ord(kv[0])))
    total = sum(mass.values())
    selected = []
    cum = 0
    for char, m in ranked:
        selected.append(char)
        cum += m
        if cum >= coverage * total:
            break
    return selected


@dataclass(frozen=True)
class AugmentPolicy:
    word_repeats: tuple[int, ...] = (1, 2)
    word_max_chars: int = 7
    char_repeats: tuple[int, ...] = (1, 2, 3, 4, 5)
    char_coverage: float = 0.9
    char_min_run: int = 3
    crossfade_ms: float = 0.0

    def __post_init__(self):
        if not self.word_repeats and not self.char_repeats:
            raise ValueError("policy has no repeat counts at all")


def augment_manifest(manifest: CorpusManifest, policy: AugmentPolicy,
                     out_dir: str | Path, seed: int = 0) -> CorpusManifest:
    """Emit augmented variants next to the originals.

    Original records keep their source files; each variant gets a derived id
    (`<id>#w<k>` or `<id>#c<run_index>x<r>`), its own WAV and alignment under
    `out_dir`, and the augmented manifest records the policy in a comment.
    Records without alignments are passed through untouched.
    """
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    (out_dir / "align").mkdir(parents=True, exist_ok=True)
    selected = set(select_augmentable_chars((r.text for r in manifest.records),
                                            policy.char_coverage, policy.char_min_run))
    sr = manifest.sample_rate
    new_records = list(manifest.records)
    skipped = 0

    for rec in manifest.records:
        if rec.alignment_path is None:
            skipped += 1
            continue
        wave = load_record_audio(rec, manifest)
        alignment = rec.load_alignment()

        variants: list[tuple[str, str, np.ndarray, CharAlignment]] = []
        if len(rec.text) <= policy.word_max_chars:
            for k in policy.word_repeats:
                text2, wave2, align2 = repeat_word(rec.text, wave, alignment, k, sr)
                variants.append((f"{rec.id}#w{k}", text2, wave2, align2))
        for run_index, run in enumerate(find_char_runs(rec.text, policy.char_min_run)):
            if run.char not in selected:
                continue
            for r in policy.char_repeats:
                text2, wave2, align2 = repeat_char(rec.text, wave, alignment, run, r,
                                                   sr, policy.crossfade_ms)
                variants.append((f"{rec.id}#c{run_index}x{r}", text2, wave2, align2))

        for var_id, text2, wave2, align2 in variants:
            wav_path = out_dir / "wavs" / f"{_safe_name(var_id)}.wav"
            align_path = out_dir / "align" / f"{_safe_name(var_id)}.align"
            dsp.write_wav(wav_path, wave2, sr)
            write_alignment(align_path, align2)
            new_records.append(replace(rec, id=var_id, text=text2,
                                       audio_path=wav_path.resolve(),
                                       alignment_path=align_path.resolve()))

    if skipped:
        logger.warning("augmentation skipped %d records without alignments", skipped)
    augmented = CorpusManifest(records=tuple(new_records),
                               clusters=build_clusters(new_records),
                               sample_rate=sr)
    write_manifest(augmented, out_dir / "manifest.tsv", header_comments=[
        f"augmented: word_repeats={list(policy.word_repeats)} "
        f"word_max_chars={policy.word_max_chars} "
        f"char_repeats={list(policy.char_repeats)} coverage={policy.char_coverage} "
        f"crossfade_ms={policy.crossfade_ms} seed={seed}",
    ])
    return augmented


def _safe_name(record_id: str) -> str:
    return record_id.replace("#", "_")
