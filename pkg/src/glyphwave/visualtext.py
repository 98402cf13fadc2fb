"""Monospaced rendering of onomatopoeia text, width stretching, and slicing.

Ink is 1.0 and background is 0.0, so right-padding with zeros is literally
background. Character boxes keep fractional pixel boundaries; rounding only
happens when slicing into fixed-width tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError


class EmptyText(ValueError):
    """Text must contain at least one character."""


class UnsupportedGlyph(DataError):
    def __init__(self, char: str):
        super().__init__(f"no glyph for codepoint U+{ord(char):04X} ({char!r})")
        self.char = char


class NonPositiveRate(ValueError):
    pass


class NonPositiveDuration(ValueError):
    pass


class NonPositiveRatio(ValueError):
    pass


class CanvasTooSmall(ValueError):
    pass


class MismatchedText(DataError):
    """Alignment spans do not match the rendered text."""


@dataclass(frozen=True)
class GlyphBitmap:
    """One h-by-w grayscale glyph or token, values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.float64))
        if self.pixels.ndim != 2:
            raise ValueError(f"glyph pixels must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("glyph pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class VisualOnomatopoeia:
    """Rendered text bitmap plus per-character pixel boxes.

    `pixels` spans the full canvas (text region plus optional zero padding on
    the right); `text_width` is the pixel width of the text region alone.
    Boxes tile [0, text_width] in text order with fractional boundaries.
    `exact_width` carries the unrounded target width so that chained
    stretches compose without accumulating rounding drift.
    """

    pixels: np.ndarray
    char_boxes: tuple[tuple[str, float, float], ...]
    source_text: str
    stretch_applied: float
    text_width: int
    exact_width: float

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def canvas_width(self) -> int:
        return int(self.pixels.shape[1])


# ---------------------------------------------------------------------------
# Glyph providers


class ProceduralGlyphs:
    """Deterministic per-codepoint block patterns; no font files needed.

    Each codepoint gets a hash-seeded coarse binary grid upscaled to the cell,
    with a clear margin so stretching artifacts stay visible.
    """

    def __init__(self, cell: tuple[int, int] = (24, 24), seed: int = 0, margin: int = 2):
        h, w = cell
        if h < 8 or w < 8:
            raise ValueError("procedural glyphs need a cell of at least 8x8")
        self.cell = (int(h), int(w))
        self.seed = int(seed)
        self.margin = int(margin)
        self._cache: dict[str, np.ndarray] = {}

    def glyph(self, char: str) -> np.ndarray:
        cached = self._cache.get(char)
        if cached is not None:
            return cached
        h, w = self.cell
        m = self.margin
        ih, iw = h - 2 * m, w - 2 * m
        rng = np.random.default_rng([self.seed, ord(char)])
        coarse = (rng.random((max(1, ih // 4), max(1, iw // 4))) < 0.45).astype(np.float64)
        block = np.kron(coarse, np.ones((4, 4)))[:ih, :iw]
        out = np.zeros((h, w), dtype=np.float64)
        out[m:m + ih, m:m + iw] = block
        out.setflags(write=False)
        self._cache[char] = out
        return out


class BitmapFont:
    """Glyphs loaded from the `.glyphs` text format.

    Header line: `h w`. Each following line: `U+XXXX <hex>`, where the hex
    string packs the rows top to bottom, each row MSB-first in ceil(w/4)
    hex digits.
    """

    def __init__(self, path: str | Path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise DataError(f"{path}: empty glyph file")
        try:
            h, w = (int(v) for v in lines[0].split())
        except ValueError as exc:
            raise DataError(f"{path}: bad header {lines[0]!r}") from exc
        self.cell = (h, w)
        digits_per_row = (w + 3) // 4
        self._glyphs: dict[str, np.ndarray] = {}
        for ln, line in enumerate(lines[1:], start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                code_str, hexdata = line.split()
                code = int(code_str.removeprefix("U+"), 16)
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: bad glyph line") from exc
            if len(hexdata) != digits_per_row * h:
                raise DataError(f"{path}:{ln}: expected {digits_per_row * h} hex digits, "
                                f"got {len(hexdata)}")
            rows = np.zeros((h, w), dtype=np.float64)
            for r in range(h):
                chunk = hexdata[r * digits_per_row:(r + 1) * digits_per_row]
                bits = bin(int(chunk, 16))[2:].zfill(digits_per_row * 4)
                rows[r] = [1.0 if b == "1" else 0.0 for b in bits[:w]]
            rows.setflags(write=False)
            self._glyphs[chr(code)] = rows

    def glyph(self, char: str) -> np.ndarray:
        try:
            return self._glyphs[char]
        except KeyError:
            raise UnsupportedGlyph(char) from None


def write_bitmap_font(path: str | Path, cell: tuple[int, int],
                      glyphs: dict[str, np.ndarray]) -> None:
    """Write the `.glyphs` format understood by BitmapFont."""
    h, w = cell
    digits_per_row = (w + 3) // 4
    lines = [f"{h} {w}"]
    for char in sorted(glyphs):
        bitmap = np.asarray(glyphs[char])
        if bitmap.shape != (h, w):
            raise ValueError(f"glyph for {char!r} has shape {bitmap.shape}, expected {(h, w)}")
        hexdata = []
        for r in range(h):
            bits = "".join("1" if v >= 0.5 else "0" for v in bitmap[r])
            bits = bits.ljust(digits_per_row * 4, "0")
            hexdata.append(f"{int(bits, 2):0{digits_per_row}X}")
        lines.append(f"U+{ord(char):04X} {''.join(hexdata)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Rendering and geometry


def render_visual_text(text: str, glyph_source, cell: tuple[int, int] | None = None
                       ) -> VisualOnomatopoeia:
    """Render text left to right on a monospaced grid of `cell`-sized glyphs."""
    if not text:
        raise EmptyText("cannot render empty text")
    h, w = cell if cell is not None else glyph_source.cell
    if (h, w) != tuple(glyph_source.cell):
        raise ValueError(f"cell {cell} does not match glyph source cell {glyph_source.cell}")
    n = len(text)
    pixels = np.zeros((h, n * w), dtype=np.float64)
    boxes = []
    for i, char in enumerate(text):
        bitmap = glyph_source.glyph(char)
        if bitmap.shape != (h, w):
            raise UnsupportedGlyph(char)
        pixels[:, i * w:(i + 1) * w] = bitmap
        boxes.append((char, float(i * w), float((i + 1) * w)))
    return VisualOnomatopoeia(pixels=pixels, char_boxes=tuple(boxes), source_text=text,
                              stretch_applied=1.0, text_width=n * w,
                              exact_width=float(n * w))


def _resample_columns(pixels: np.ndarray, new_width: int) -> np.ndarray:
    """Linear interpolation over pixel columns to the new width."""
    old_width = pixels.shape[1]
    if new_width == old_width:
        return pixels.copy()
    if new_width < 1:
        raise ValueError("resampled width must be >= 1")
    src = (np.arange(new_width) + 0.5) * (old_width / new_width) - 0.5
    src = np.clip(src, 0.0, old_width - 1.0)
    grid = np.arange(old_width, dtype=np.float64)
    out = np.empty((pixels.shape[0], new_width), dtype=np.float64)
    for r in range(pixels.shape[0]):
        out[r] = np.interp(src, grid, pixels[r])
    return out


def _scaled(visual: VisualOnomatopoeia, exact_width: float,
            stretch_applied: float) -> VisualOnomatopoeia:
    old = visual.text_width
    new_width = max(1, int(round(exact_width)))
    resampled = _resample_columns(visual.pixels[:, :old], new_width)
    if new_width == old:
        boxes = visual.char_boxes
    else:
        boxes = tuple((char, xs / old * new_width, xe / old * new_width)
                      for char, xs, xe in visual.char_boxes)
    return VisualOnomatopoeia(pixels=resampled, char_boxes=boxes,
                              source_text=visual.source_text,
                              stretch_applied=stretch_applied, text_width=new_width,
                              exact_width=exact_width)


def stretch_to_duration(visual: VisualOnomatopoeia, rate: float, duration_sec: float,
                        cell_w: int) -> VisualOnomatopoeia:
    """Resample the text region to the canonical width for a sound of the
    given duration: round(rate * duration * cell_w) pixels.

    Texts of different lengths for equal-duration sounds in one cluster come
    out with equal widths.
    """
    if rate <= 0.0:
        raise NonPositiveRate(f"rate must be > 0, got {rate}")
    if duration_sec <= 0.0:
        raise NonPositiveDuration(f"duration must be > 0, got {duration_sec}")
    if visual.stretch_applied != 1.0:
        raise ValueError("duration-informed stretch expects an unstretched render")
    n = len(visual.source_text)
    return _scaled(visual, rate * duration_sec * cell_w,
                   stretch_applied=rate * duration_sec / n)


def stretch_by_ratio(visual: VisualOnomatopoeia, ratio: float) -> VisualOnomatopoeia:
    """Multiply the text-region width by `ratio` (linear resampling)."""
    if ratio <= 0.0:
        raise NonPositiveRatio(f"ratio must be > 0, got {ratio}")
    return _scaled(visual, visual.exact_width * ratio,
                   stretch_applied=visual.stretch_applied * ratio)


def pad_to_canvas(visual: VisualOnomatopoeia, canvas_width: int) -> VisualOnomatopoeia:
    """Append zero columns on the right up to `canvas_width`."""
    current = visual.canvas_width
    if canvas_width < current:
        raise CanvasTooSmall(f"canvas {canvas_width} < current width {current}")
    if canvas_width == current:
        return visual
    padded = np.zeros((visual.height, canvas_width), dtype=np.float64)
    padded[:, :current] = visual.pixels
    return replace(visual, pixels=padded)


def slice_into_tokens(visual: VisualOnomatopoeia, cell_w: int) -> list[GlyphBitmap]:
    """Cut the text region (not the padding) into width-`cell_w` tokens.

    The final partial token is right-padded with zeros. An unstretched render
    slices back into its source glyphs exactly.
    """
    if cell_w <= 0:
        raise ValueError("cell_w must be positive")
    width = visual.text_width
    if width == 0:
        return []
    tokens = []
    for start in range(0, width, cell_w):
        stop = min(start + cell_w, width)
        chunk = visual.pixels[:, start:stop]
        if stop - start < cell_w:
            full = np.zeros((visual.height, cell_w), dtype=np.float64)
            full[:, :stop - start] = chunk
            chunk = full
        tokens.append(GlyphBitmap(chunk))
    return tokens


# ---------------------------------------------------------------------------
# Alignment remapping


def remap_alignment_to_tokens(alignment, visual: VisualOnomatopoeia, cell_w: int,
                              total_frames: int) -> np.ndarray:
    """Map token pixel intervals to integer frame counts summing to
    `total_frames`.

    Each character box is mapped linearly onto its alignment span; a token's
    share is its covered span time, normalized over all spans, with a
    largest-remainder correction so the counts sum exactly.
    """
    spans = alignment.spans
    if [s.char for s in spans] != list(visual.source_text):
        raise MismatchedText(
            f"alignment chars {''.join(s.char for s in spans)!r} "
            f"!= text {visual.source_text!r}")
    if total_frames < 0:
        raise ValueError("total_frames must be >= 0")
    width = visual.text_width
    n_tokens = -(-width // cell_w) if width else 0
    if n_tokens == 0:
        return np.zeros(0, dtype=np.int64)

    shares = np.zeros(n_tokens, dtype=np.float64)
    for (char, xs, xe), span in zip(visual.char_boxes, spans):
        box_w = xe - xs
        span_dur = span.end_sec - span.start_sec
        if box_w <= 0.0:
            continue
        for j in range(int(xs // cell_w), min(n_tokens, int(np.ceil(xe / cell_w)) + 1)):
            lo = max(xs, j * cell_w)
            hi = min(xe, (j + 1) * cell_w)
            if hi > lo:
                shares[j] += (hi - lo) / box_w * span_dur
    total_share = shares.sum()
    if total_share <= 0.0:
        # Degenerate alignment; spread uniformly.
        shares[:] = 1.0
        total_share = float(n_tokens)

    exact = shares / total_share * total_frames
    counts = np.floor(exact).astype(np.int64)
    remainder = total_frames - int(counts.sum())
    if remainder > 0:
        fractional = exact - counts
        order = np.lexsort((np.arange(n_tokens), -fractional))
        counts[order[:remainder]] += 1
    return counts


# ---------------------------------------------------------------------------
# PGM export for inspection


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape
    data = np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval
