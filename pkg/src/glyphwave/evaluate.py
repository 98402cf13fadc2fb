"""Objective experiment harness: duration measurement, repetition and stretch
response curves, and conditioning-diversity statistics.

Each experiment emits a versioned CSV (header row, data rows, then `#meta`
footer lines). Subjective listening results are out of reach here; the CSVs
note that explicitly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .augment import find_char_runs
from .model import toy_image_embedding
from .train import Checkpoint, synthesize
from .visualtext import read_pgm

logger = logging.getLogger(__name__)

STRETCH_RATIOS = (0.5, 1.0, 1.5, 2.0)
SUBJECTIVE_NOTE = "subjective_mos=skipped (listening tests not reproducible here)"


class AllSilent(ValueError):
    pass


class NeedAtLeastTwo(ValueError):
    pass


def measure_duration(mel: dsp.MelSpectrogram, threshold_nats: float = 3.0) -> float:
    """Seconds spanned by frames whose peak log-mel exceeds the silence floor
    by `threshold_nats`.

    The span includes the analysis-window tail, so a tone of length L
    measures L to within a couple of hops.
    """
    config = mel.config
    floor = float(np.log(config.log_floor))
    active = np.flatnonzero(mel.frames.max(axis=1) > floor + threshold_nats)
    if active.size == 0:
        raise AllSilent("no frames above the silence threshold")
    count = int(active[-1] - active[0] + 1)
    return ((count - 1) * config.hop + config.frame_length) / config.sample_rate


def measure_duration_waveform(wave: np.ndarray, config: dsp.DspConfig,
                              threshold_nats: float = 3.0) -> float:
    return measure_duration(dsp.mel_spectrogram(wave, config), threshold_nats)


def relative_duration_curve(base: dsp.MelSpectrogram,
                            variants: list[tuple[object, dsp.MelSpectrogram]],
                            threshold_nats: float = 3.0) -> list[tuple[object, float]]:
    """Each variant's duration divided by the base duration."""
    base_duration = measure_duration(base, threshold_nats)
    return [(key, measure_duration(mel, threshold_nats) / base_duration)
            for key, mel in variants]


def diversity_msd(mels: list[dsp.MelSpectrogram], target_frames: int = 64
                  ) -> tuple[float, list[tuple[int, int, float]]]:
    """Mean squared mel distance over all unordered output pairs."""
    if len(mels) < 2:
        raise NeedAtLeastTwo(f"need >= 2 outputs, got {len(mels)}")
    pairs = []
    for i in range(len(mels)):
        for j in range(i + 1, len(mels)):
            pairs.append((i, j, dsp.mel_distance(mels[i], mels[j], target_frames)))
    return float(np.mean([p[2] for p in pairs])), pairs


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares line; returns (slope, intercept, r_squared)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x_mean, y_mean = xs.mean(), ys.mean()
    var = float(((xs - x_mean) ** 2).sum())
    if var == 0.0:
        raise ValueError("cannot fit a line to a single x value")
    slope = float(((xs - x_mean) * (ys - y_mean)).sum() / var)
    intercept = float(y_mean - slope * x_mean)
    ss_res = float(((ys - (slope * xs + intercept)) ** 2).sum())
    ss_tot = float(((ys - y_mean) ** 2).sum())
    if ss_tot < 1e-12:
        r2 = 1.0 if ss_res < 1e-12 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return slope, intercept, r2


# ---------------------------------------------------------------------------
# Input construction for repetition grids


def word_variant(text: str, k: int) -> str:
    return text * (k + 1)


def char_variant(text: str, r: int) -> str:
    """Insert r copies of the longest run's character after its middle
    occurrence, mirroring the augmentation's insertion point."""
    if r == 0:
        return text
    runs = find_char_runs(text, min_len=1)
    run = max(runs, key=lambda c: (c.length, -c.start_index))
    mid = run.start_index + run.length // 2
    return text[:mid + 1] + run.char * r + text[mid + 1:]


# ---------------------------------------------------------------------------
# CSV plumbing


def write_experiment_csv(path: str | Path, header: list[str], rows: list[tuple],
                         schema: str, meta: dict) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    lines.append(f"#meta schema={schema}.v1")
    for key in sorted(meta):
        lines.append(f"#meta {key}={_fmt(meta[key])}")
    lines.append(f"#meta {SUBJECTIVE_NOTE}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.8g}"
    return str(value)


def read_experiment_csv(path: str | Path) -> tuple[list[str], list[list[str]], dict]:
    header: list[str] = []
    rows: list[list[str]] = []
    meta: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#meta "):
            body = line[len("#meta "):]
            key, _, value = body.partition("=")
            meta[key] = value
        elif not header:
            header = line.split(",")
        elif line.strip():
            rows.append(line.split(","))
    return header, rows, meta


def to_long_format(path: str | Path) -> list[tuple[str, float, float]]:
    """Re-emit an experiment CSV as (series, x, y) rows for external tools."""
    header, rows, meta = read_experiment_csv(path)
    schema = meta.get("schema", "")
    out = []
    if schema.startswith("repetition"):
        for system, level, k, mean, _std in rows:
            out.append((f"{system}/{level}", float(k), float(mean)))
    elif schema.startswith("stretch"):
        for ratio, mean, _std in rows:
            out.append(("stretch", float(ratio), float(mean)))
    elif schema.startswith("diversity"):
        for i, (system, _a, _b, d) in enumerate(rows):
            out.append((system, float(i), float(d)))
    else:
        raise ValueError(f"{path}: unknown schema {schema!r}")
    return out


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class RepetitionResult:
    rows: list[tuple]        # (system, level, repeat_count, mean_rel, std_rel)
    meta: dict
    csv_path: Path | None

    def mean_at(self, system: str, level: str, k: int) -> float:
        for row in self.rows:
            if row[0] == system and row[1] == level and row[2] == k:
                return row[3]
        raise KeyError((system, level, k))

    def means(self, system: str, level: str) -> list[tuple[int, float]]:
        return sorted((row[2], row[3]) for row in self.rows
                      if row[0] == system and row[1] == level)


def run_repetition_experiment(ckpt_aug: Checkpoint, ckpt_noaug: Checkpoint,
                              cases: list[tuple[str, str]],
                              word_grid=range(0, 5), char_grid=range(0, 11),
                              out_csv: str | Path | None = None,
                              threshold_nats: float = 3.0,
                              char_cases: list[tuple[str, str]] | None = None
                              ) -> RepetitionResult:
    """Relative durations over word and character repetition grids, for the
    augmentation-trained and plain systems on identical inputs.

    `cases` feeds the word grid; the char grid uses `char_cases` when given
    (e.g. restricted to texts with short runs) and `cases` otherwise.
    """
    systems = [("augmented", ckpt_aug), ("no_augmentation", ckpt_noaug)]
    grids = [("word", list(word_grid), word_variant, cases),
             ("char", list(char_grid), char_variant,
              char_cases if char_cases is not None else cases)]
    rows = []
    meta = {}
    for system, ckpt in systems:
        for level, grid, variant, level_cases in grids:
            rels = {k: [] for k in grid}
            for text, label in level_cases:
                base = synthesize(ckpt, text, event=label, vocoder=False)
                base_dur = measure_duration(base.mel, threshold_nats)
                for k in grid:
                    if k == 0:
                        rels[k].append(1.0)
                        continue
                    out = synthesize(ckpt, variant(text, k), event=label, vocoder=False)
                    rels[k].append(measure_duration(out.mel, threshold_nats) / base_dur)
            means = []
            for k in grid:
                vals = np.asarray(rels[k])
                rows.append((system, level, k, float(vals.mean()), float(vals.std())))
                means.append(float(vals.mean()))
            slope, _, r2 = linear_fit(grid, means)
            meta[f"{level}_slope_{system}"] = slope
            meta[f"{level}_r2_{system}"] = r2
    meta["n_cases"] = len(cases)
    result = RepetitionResult(rows=rows, meta=meta,
                              csv_path=Path(out_csv) if out_csv else None)
    if out_csv:
        write_experiment_csv(out_csv,
                             ["system", "level", "repeat_count", "mean_rel_duration",
                              "std_rel_duration"],
                             rows, "repetition", meta)
    return result


@dataclass
class StretchResult:
    rows: list[tuple]        # (ratio, mean_rel, std_rel)
    slope: float
    r2: float
    meta: dict
    csv_path: Path | None

    def means(self) -> list[tuple[float, float]]:
        return [(row[0], row[1]) for row in self.rows]


def run_stretch_experiment(ckpt: Checkpoint, cases: list[tuple[str, str]],
                           ratios=STRETCH_RATIOS,
                           out_csv: str | Path | None = None,
                           threshold_nats: float = 3.0) -> StretchResult:
    """Relative durations across width-stretch ratios, normalized at 1.0."""
    ratios = list(ratios)
    rels = {r: [] for r in ratios}
    for text, label in cases:
        base = synthesize(ckpt, text, stretch=("ratio", 1.0), event=label, vocoder=False)
        base_dur = measure_duration(base.mel, threshold_nats)
        for ratio in ratios:
            if ratio == 1.0:
                rels[ratio].append(1.0)
                continue
            out = synthesize(ckpt, text, stretch=("ratio", ratio), event=label,
                             vocoder=False)
            rels[ratio].append(measure_duration(out.mel, threshold_nats) / base_dur)
    rows = []
    means = []
    for ratio in ratios:
        vals = np.asarray(rels[ratio])
        rows.append((float(ratio), float(vals.mean()), float(vals.std())))
        means.append(float(vals.mean()))
    slope, intercept, r2 = linear_fit(ratios, means)
    meta = {"slope": slope, "intercept": intercept, "r2": r2, "n_cases": len(cases)}
    result = StretchResult(rows=rows, slope=slope, r2=r2, meta=meta,
                           csv_path=Path(out_csv) if out_csv else None)
    if out_csv:
        write_experiment_csv(out_csv,
                             ["ratio", "mean_rel_duration", "std_rel_duration"],
                             rows, "stretch", meta)
    return result


@dataclass
class DiversityResult:
    msd_image: float
    msd_label: float
    pair_rows: list[tuple]   # (system, a, b, sq_distance)
    meta: dict
    csv_path: Path | None


def run_diversity_experiment(ckpt_image: Checkpoint, ckpt_label: Checkpoint,
                             texts: list[str], image_paths: list[str | Path],
                             label: str, out_csv: str | Path | None = None,
                             target_frames: int = 64) -> DiversityResult:
    """Output diversity with image conditioning vs label conditioning.

    Both systems synthesize the same text sequence (texts cycled over the
    image list); only the conditioning differs.
    """
    if len(image_paths) < 2:
        raise NeedAtLeastTwo("need at least two event images")
    embedder_seed = int(ckpt_image.meta.get("embedder_seed", 0))
    image_mels = []
    label_mels = []
    for i, image_path in enumerate(image_paths):
        text = texts[i % len(texts)]
        feature = toy_image_embedding(read_pgm(image_path), embedder_seed)
        image_mels.append(synthesize(ckpt_image, text, event=feature, vocoder=False).mel)
        label_mels.append(synthesize(ckpt_label, text, event=label, vocoder=False).mel)
    msd_image, pairs_image = diversity_msd(image_mels, target_frames)
    msd_label, pairs_label = diversity_msd(label_mels, target_frames)
    rows = [("image", a, b, d) for a, b, d in pairs_image]
    rows += [("label", a, b, d) for a, b, d in pairs_label]
    meta = {"msd_image": msd_image, "msd_label": msd_label,
            "n_outputs": len(image_paths), "label": label}
    result = DiversityResult(msd_image=msd_image, msd_label=msd_label, pair_rows=rows,
                             meta=meta, csv_path=Path(out_csv) if out_csv else None)
    if out_csv:
        write_experiment_csv(out_csv, ["system", "a", "b", "sq_distance"],
                             rows, "diversity", meta)
    return result


def repetition_cases_from_manifest(manifest, max_cases: int = 8,
                                   max_chars: int = 7,
                                   max_run: int | None = None
                                   ) -> list[tuple[str, str]]:
    """Short, unaugmented texts (one per distinct text) for the grids.

    `max_run` additionally caps the longest character run, which keeps
    char-grid inputs inside the length range the training data can cover.
    """
    cases = []
    seen = set()
    for rec in manifest.records:
        if "#" in rec.id or len(rec.text) > max_chars or rec.text in seen:
            continue
        if max_run is not None:
            runs = find_char_runs(rec.text, min_len=1)
            if runs and max(r.length for r in runs) > max_run:
                continue
        seen.add(rec.text)
        cases.append((rec.text, rec.event_label))
        if len(cases) >= max_cases:
            break
    return cases
