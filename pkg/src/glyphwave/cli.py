"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Diagnostics go to stderr; results go to files or stdout. Every subcommand
accepts --seed and --config (JSON file whose keys mirror the flags; explicit
flags win).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import augment as augment_mod
from . import corpus as corpus_mod
from . import dsp
from . import evaluate as eval_mod
from . import train as train_mod
from .errors import DataError, NumericError
from .model import (ModelConfig, load_embedding_file, null_event_feature,
                    toy_image_embedding)
from .visualtext import (ProceduralGlyphs, pad_to_canvas, read_pgm, render_visual_text,
                         slice_into_tokens, stretch_by_ratio, stretch_to_duration,
                         write_pgm)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="glyphwave",
                     description="Sound synthesis from rendered onomatopoeia text.")
    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs: dict[str, _Parser] = {}

    def sub(name, help_text):
        p = subparsers.add_parser(name, help=help_text,
                                  formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file; keys mirror the flags, flags win")
        p.add_argument("--print-config", action="store_true",
                       help="dump the effective configuration as JSON and exit")
        p.add_argument("--verbose", action="store_true", help="log progress to stderr")
        subs[name] = p
        return p

    p = sub("gen-corpus", "generate a deterministic synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", default="basic",
                   choices=["basic", "stretch", "repetition", "repetition-eval",
                            "diversity"],
                   help="corpus recipe")
    p.add_argument("--records-per-class", type=int, default=50)
    p.add_argument("--spec-json", default=None,
                   help="full generator spec as JSON (overrides --preset)")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub("prepare", "render/stretch/slice a text and export PGM previews")
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cell", type=int, default=24, help="glyph cell size in px")
    p.add_argument("--glyph-seed", type=int, default=0)
    p.add_argument("--ratio", type=float, default=None, help="stretch ratio")
    p.add_argument("--rate", type=float, default=None,
                   help="sounding rate for duration-informed stretch (chars/sec)")
    p.add_argument("--duration", type=float, default=None,
                   help="target duration for duration-informed stretch (sec)")
    p.add_argument("--canvas", type=int, default=None, help="pad to this width")
    p.set_defaults(func=cmd_prepare)

    p = sub("augment", "emit repetition-augmented variants of a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--word-repeats", type=_int_list, default=(1, 2))
    p.add_argument("--word-max-chars", type=int, default=7)
    p.add_argument("--char-repeats", type=_int_list, default=(1, 2, 3, 4, 5))
    p.add_argument("--coverage", type=float, default=0.9,
                   help="run-mass coverage for augmentable character selection")
    p.add_argument("--crossfade-ms", type=float, default=0.0)
    p.set_defaults(func=cmd_augment)

    p = sub("train", "train the acoustic model on a manifest")
    p.add_argument("--manifest", required=True, help="training corpus manifest")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int, default=50, help="training epochs")
    p.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=8, help="items per step")
    p.add_argument("--grad-clip", type=float, default=1.0, help="max gradient L2 norm")
    p.add_argument("--val-fraction", type=float, default=0.1, help="held-out fraction")
    p.add_argument("--d-model", type=int, default=128, help="hidden width")
    p.add_argument("--enc-layers", type=int, default=2, help="encoder blocks")
    p.add_argument("--dec-layers", type=int, default=2, help="decoder blocks")
    p.add_argument("--d-ff", type=int, default=256, help="feed-forward width")
    p.add_argument("--dp-hidden", type=int, default=128,
                   help="duration predictor width")
    p.add_argument("--cell", type=int, default=24, help="glyph cell size in px")
    p.add_argument("--n-mels", type=int, default=80, help="mel bins")
    p.add_argument("--frame-length", type=int, default=1024, help="STFT frame samples")
    p.add_argument("--hop", type=int, default=256, help="STFT hop samples")
    p.add_argument("--gl-iters", type=int, default=60, help="Griffin-Lim iterations")
    p.add_argument("--stretch", default="none", choices=["none", "duration"],
                   help="duration-informed width stretch as training preprocessing")
    p.add_argument("--event-source", default="label", choices=["label", "images", "null"],
                   help="conditioning input per record")
    p.add_argument("--images-dir", default=None,
                   help="event image directory (default: images/ next to the manifest)")
    p.add_argument("--min-confidence", type=int, default=3,
                   help="drop records below this confidence score")
    p.add_argument("--glyph-seed", type=int, default=0, help="procedural glyph seed")
    p.add_argument("--embedder-seed", type=int, default=0,
                   help="toy image embedder projection seed")
    p.add_argument("--uniform-alignments", action="store_true",
                   help="fall back to uniform alignments for records without files")
    p.set_defaults(func=cmd_train)

    p = sub("synth", "synthesize a waveform from text")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--ratio", type=float, default=None, help="stretch ratio")
    p.add_argument("--duration", type=float, default=None,
                   help="target duration in seconds (duration-informed stretch)")
    p.add_argument("--label", default=None, help="event label for conditioning")
    p.add_argument("--image", default=None, help="event image (PGM) for conditioning")
    p.add_argument("--embedding", default=None, help="raw 256xf32 embedding file")
    p.add_argument("--save-mel", default=None, help="also write the mel (binary)")
    p.set_defaults(func=cmd_synth)

    p = sub("eval-repetition", "relative-duration curves over repetition grids")
    p.add_argument("--ckpt-aug", required=True)
    p.add_argument("--ckpt-noaug", required=True)
    p.add_argument("--manifest", required=True, help="evaluation corpus for input texts")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--word-max", type=int, default=4, help="word grid is 0..this")
    p.add_argument("--char-max", type=int, default=10, help="char grid is 0..this")
    p.add_argument("--max-cases", type=int, default=8, help="evaluation texts to use")
    p.add_argument("--case-max-chars", type=int, default=7,
                   help="restrict word-grid texts to this many characters")
    p.add_argument("--case-max-run", type=int, default=None,
                   help="restrict char-grid texts to runs of at most this length")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_eval_repetition)

    p = sub("eval-stretch", "relative-duration curve over stretch ratios")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=_float_list, default=(0.5, 1.0, 1.5, 2.0),
                   help="stretch ratio grid")
    p.add_argument("--max-cases", type=int, default=8, help="evaluation texts to use")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_eval_stretch)

    p = sub("eval-diversity", "output diversity: image vs label conditioning")
    p.add_argument("--ckpt-image", required=True)
    p.add_argument("--ckpt-label", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--label", default=None, help="event class (default: first cluster)")
    p.add_argument("--n-images", type=int, default=12, help="distinct event images")
    p.add_argument("--n-texts", type=int, default=4, help="distinct texts to cycle")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_eval_diversity)

    p = sub("grad-check", "finite-difference check of the composed model")
    p.add_argument("--samples", type=int, default=120)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub("plotdata", "re-emit an experiment CSV as long-format series,x,y")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.set_defaults(func=cmd_plotdata)

    return parser, subs


# ---------------------------------------------------------------------------
# Handlers


def cmd_gen_corpus(args) -> int:
    if args.spec_json:
        spec = corpus_mod.generator_spec_from_dict(
            json.loads(Path(args.spec_json).read_text(encoding="utf-8")))
    else:
        spec = corpus_mod.preset_spec(args.preset, args.records_per_class)
    manifest = corpus_mod.generate_synthetic_corpus(spec, args.out, args.seed)
    print(f"wrote {len(manifest)} records to {args.out}/manifest.tsv")
    for label, cluster in sorted(manifest.clusters.items()):
        print(f"  {label}: {len(cluster.record_ids)} records, "
              f"sounding rate {cluster.sounding_rate:.3f} chars/sec")
    return 0


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    glyphs = ProceduralGlyphs((args.cell, args.cell), args.glyph_seed)
    visual = render_visual_text(args.text, glyphs)
    write_pgm(out / "render.pgm", visual.pixels)
    if (args.rate is None) != (args.duration is None):
        raise DataError("--rate and --duration must be given together")
    if args.rate is not None:
        visual = stretch_to_duration(visual, args.rate, args.duration, args.cell)
        write_pgm(out / "stretched.pgm", visual.pixels)
    if args.ratio is not None:
        visual = stretch_by_ratio(visual, args.ratio)
        write_pgm(out / "stretched.pgm", visual.pixels)
    if args.canvas is not None:
        visual = pad_to_canvas(visual, args.canvas)
        write_pgm(out / "padded.pgm", visual.pixels)
    tokens = slice_into_tokens(visual, args.cell)
    for i, token in enumerate(tokens):
        write_pgm(out / f"token_{i:02d}.pgm", token.pixels)
    print(f"text={args.text!r} width={visual.text_width}px "
          f"stretch={visual.stretch_applied:.4f} tokens={len(tokens)}")
    for char, xs, xe in visual.char_boxes:
        print(f"  {char!r}: [{xs:.2f}, {xe:.2f})")
    return 0


def cmd_augment(args) -> int:
    manifest = corpus_mod.load_manifest(args.manifest)
    policy = augment_mod.AugmentPolicy(word_repeats=args.word_repeats,
                                       word_max_chars=args.word_max_chars,
                                       char_repeats=args.char_repeats,
                                       char_coverage=args.coverage,
                                       crossfade_ms=args.crossfade_ms)
    augmented = augment_mod.augment_manifest(manifest, policy, args.out, args.seed)
    print(f"augmented {len(manifest)} -> {len(augmented)} records "
          f"({args.out}/manifest.tsv)")
    return 0


def _model_config_from_args(args) -> ModelConfig:
    return ModelConfig(cell=(args.cell, args.cell), d_model=args.d_model,
                       n_enc_layers=args.enc_layers, n_dec_layers=args.dec_layers,
                       d_ff=args.d_ff, dp_hidden=args.dp_hidden, n_mels=args.n_mels)


def cmd_train(args) -> int:
    manifest = corpus_mod.load_manifest(args.manifest)
    dsp_config = dsp.DspConfig(sample_rate=manifest.sample_rate,
                               frame_length=args.frame_length, hop=args.hop,
                               n_mels=args.n_mels, griffin_lim_iters=args.gl_iters)
    pipeline = train_mod.PipelineConfig(
        dsp=dsp_config, stretch_mode=args.stretch, event_source=args.event_source,
        images_dir=args.images_dir, min_confidence=args.min_confidence,
        glyph_seed=args.glyph_seed, embedder_seed=args.embedder_seed,
        allow_uniform_alignment=args.uniform_alignments)
    config = train_mod.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                                   epochs=args.epochs, seed=args.seed,
                                   grad_clip=args.grad_clip,
                                   val_fraction=args.val_fraction)
    result = train_mod.train(manifest, _model_config_from_args(args), pipeline,
                             config, args.out)
    final = result.metrics[-1] if result.metrics else {}
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"best:       {result.best_checkpoint_path}")
    print(f"metrics:    {result.metrics_path} "
          f"(final total={final.get('total', float('nan')):.5f}, "
          f"val={final.get('val_total', float('nan')):.5f})")
    return 0


def _resolve_event(args, checkpoint):
    given = [name for name in ("label", "image", "embedding")
             if getattr(args, name, None) is not None]
    if len(given) > 1:
        raise DataError(f"choose one of --label/--image/--embedding, got {given}")
    if args.label is not None:
        return args.label
    if args.image is not None:
        seed = int(checkpoint.meta.get("embedder_seed", 0))
        return toy_image_embedding(read_pgm(args.image), seed)
    if args.embedding is not None:
        return load_embedding_file(args.embedding)
    return null_event_feature()


def cmd_synth(args) -> int:
    checkpoint = train_mod.load_checkpoint(args.ckpt)
    if args.ratio is not None and args.duration is not None:
        raise DataError("choose one of --ratio / --duration")
    stretch = None
    if args.ratio is not None:
        stretch = ("ratio", args.ratio)
    elif args.duration is not None:
        stretch = ("duration", args.duration)
    event = _resolve_event(args, checkpoint)
    result = train_mod.synthesize(checkpoint, args.text, stretch=stretch, event=event)
    dsp.write_wav(args.out, result.waveform, result.sample_rate)
    if args.save_mel:
        dsp.write_mel(args.save_mel, result.mel)
    total = int(result.durations.sum())
    print(f"wrote {args.out}: {total} frames "
          f"({total * checkpoint.dsp_config.hop / result.sample_rate:.3f}s), "
          f"visual width {result.visual_width}px")
    return 0


def cmd_eval_repetition(args) -> int:
    ckpt_aug = train_mod.load_checkpoint(args.ckpt_aug)
    ckpt_noaug = train_mod.load_checkpoint(args.ckpt_noaug)
    manifest = corpus_mod.load_manifest(args.manifest)
    cases = eval_mod.repetition_cases_from_manifest(manifest, args.max_cases,
                                                    max_chars=args.case_max_chars)
    char_cases = eval_mod.repetition_cases_from_manifest(
        manifest, args.max_cases, max_run=args.case_max_run)
    if not cases or not char_cases:
        raise DataError("no usable evaluation texts in the manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = eval_mod.run_repetition_experiment(
        ckpt_aug, ckpt_noaug, cases, word_grid=range(0, args.word_max + 1),
        char_grid=range(0, args.char_max + 1), out_csv=out / "repetition.csv",
        char_cases=char_cases)
    if not args.no_figures:
        from .report import plot_repetition
        plot_repetition(result, out / "repetition.png")
    for key in sorted(result.meta):
        print(f"{key}={eval_mod._fmt(result.meta[key])}")
    print(f"wrote {out / 'repetition.csv'}")
    return 0


def cmd_eval_stretch(args) -> int:
    checkpoint = train_mod.load_checkpoint(args.ckpt)
    manifest = corpus_mod.load_manifest(args.manifest)
    cases = eval_mod.repetition_cases_from_manifest(manifest, args.max_cases)
    if not cases:
        raise DataError("no usable evaluation texts in the manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = eval_mod.run_stretch_experiment(checkpoint, cases, ratios=args.ratios,
                                             out_csv=out / "stretch.csv")
    if not args.no_figures:
        from .report import plot_stretch
        plot_stretch(result, out / "stretch.png")
    print(f"slope={result.slope:.4f} r2={result.r2:.4f}")
    print(f"wrote {out / 'stretch.csv'}")
    return 0


def cmd_eval_diversity(args) -> int:
    ckpt_image = train_mod.load_checkpoint(args.ckpt_image)
    ckpt_label = train_mod.load_checkpoint(args.ckpt_label)
    manifest = corpus_mod.load_manifest(args.manifest)
    label = args.label or manifest.labels[0]
    if label not in manifest.clusters:
        raise DataError(f"label {label!r} not in manifest clusters {manifest.labels}")
    records = [manifest.by_id(rid) for rid in manifest.clusters[label].record_ids]
    images = []
    for rec in records[:args.n_images]:
        path = corpus_mod.event_image_path(args.manifest, rec.id)
        if not path.exists():
            raise DataError(f"event image not found: {path}")
        images.append(path)
    texts = []
    for rec in records:
        if rec.text not in texts:
            texts.append(rec.text)
        if len(texts) >= args.n_texts:
            break
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = eval_mod.run_diversity_experiment(ckpt_image, ckpt_label, texts, images,
                                               label, out_csv=out / "diversity.csv")
    if not args.no_figures:
        from .report import plot_diversity
        plot_diversity(result, out / "diversity.png")
    print(f"msd_image={result.msd_image:.6f} msd_label={result.msd_label:.6f}")
    print(f"wrote {out / 'diversity.csv'}")
    return 0


def cmd_grad_check(args) -> int:
    report = train_mod.gradient_check(n_samples=args.samples, eps=args.eps,
                                      seed=args.seed, tolerance=args.tolerance)
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_sampled} "
          f"of {report.n_params} parameters (tolerance {report.tolerance:.0e})")
    if not report.passed:
        print("gradient check FAILED", file=sys.stderr)
        return 3
    print("gradient check passed")
    return 0


def cmd_plotdata(args) -> int:
    rows = eval_mod.to_long_format(args.csv)
    lines = ["series,x,y"] + [f"{s},{x:.8g},{y:.8g}" for s, x, y in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Dispatch


def _find_config_path(argv: list[str]) -> str | None:
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--config="):
            return token.split("=", 1)[1]
    return None


def _dispatch(argv: list[str]) -> int:
    parser, subs = build_parser()
    config_path = _find_config_path(argv)
    if config_path and argv and argv[0] in subs:
        overrides = json.loads(Path(config_path).read_text(encoding="utf-8"))
        sub = subs[argv[0]]
        known = {action.dest for action in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            raise DataError(f"config file keys not recognized by "
                            f"{argv[0]}: {sorted(unknown)}")
        sub.set_defaults(**overrides)
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(stream=sys.stderr,
                        level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_config:
        effective = {k: (str(v) if isinstance(v, Path) else v)
                     for k, v in sorted(vars(args).items())
                     if k not in ("func", "print_config", "config", "verbose")}
        json.dump(effective, sys.stdout, indent=2, default=str)
        sys.stdout.write("\n")
        return 0
    return args.func(args)


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        return _dispatch(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
