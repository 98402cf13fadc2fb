import json

import numpy as np
import pytest

from glyphwave import corpus, dsp, train
from glyphwave.cli import main
from glyphwave.model import ModelConfig, init_params

from conftest import TINY_DSP


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_corpus")
    code = main(["gen-corpus", "--out", str(root), "--preset", "basic",
                 "--records-per-class", "3", "--seed", "5"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def crafted_ckpt(tmp_path_factory, corpus_dir):
    """A synthesizable checkpoint without a full training run: fresh params
    with the duration head biased toward ~6 frames per token."""
    manifest = corpus.load_manifest(corpus_dir / "manifest.tsv")
    config = ModelConfig(d_model=32, n_enc_layers=1, n_dec_layers=1, d_ff=48,
                         dp_hidden=24, conv_channels=(4, 6), n_mels=20,
                         event_labels=manifest.labels)
    params = init_params(config, seed=0)
    params["dp.out.w"].data[:] = 0.0
    params["dp.out.b"].data[:] = np.log(7.0)
    meta = {"dsp": TINY_DSP.to_dict(), "stretch_mode": "none",
            "event_source": "label", "glyph_seed": 0, "embedder_seed": 0,
            "sample_rate": manifest.sample_rate,
            "cluster_rates": {k: c.sounding_rate for k, c in manifest.clusters.items()},
            "seed": 0}
    path = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    train.save_checkpoint(path, params, config, meta)
    return path


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_subcommand_is_usage_error(self):
        assert main([]) == 1

    def test_missing_required_flag(self):
        assert main(["gen-corpus"]) == 1

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "glyphwave" in capsys.readouterr().out

    def test_subcommand_help_documents_defaults(self, capsys):
        assert main(["train", "--help"]) == 0
        out = capsys.readouterr().out
        assert "0.001" in out      # learning rate
        assert "24" in out         # cell size
        assert "default: 3" in out  # confidence threshold
        assert main(["eval-stretch", "--help"]) == 0
        assert "0.5" in capsys.readouterr().out

    def test_data_error_exit_two(self, tmp_path):
        missing = tmp_path / "nope.tsv"
        assert main(["augment", "--manifest", str(missing),
                     "--out", str(tmp_path / "o")]) == 2

    def test_train_without_alignments_exit_two(self, tmp_path, capsys):
        (tmp_path / "wavs").mkdir()
        sr = 16000
        dsp.write_wav(tmp_path / "wavs" / "a.wav",
                      np.random.default_rng(0).uniform(-0.2, 0.2, sr), sr)
        (tmp_path / "manifest.tsv").write_text(
            "#sr=16000\nrec1\twavs/a.wav\tbell\t4\tkon\n")
        code = main(["train", "--manifest", str(tmp_path / "manifest.tsv"),
                     "--out", str(tmp_path / "run"), "--epochs", "1",
                     "--min-confidence", "1"])
        assert code == 2
        assert "rec1" in capsys.readouterr().err


class TestGenCorpus:
    def test_writes_manifest_and_reports(self, corpus_dir, capsys):
        assert (corpus_dir / "manifest.tsv").exists()
        manifest = corpus.load_manifest(corpus_dir / "manifest.tsv")
        assert len(manifest) == 12

    def test_spec_json(self, tmp_path):
        spec = corpus.preset_spec("basic", records_per_class=1)
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(corpus.generator_spec_to_dict(spec)))
        assert main(["gen-corpus", "--out", str(tmp_path / "c"),
                     "--spec-json", str(spec_path)]) == 0
        assert len(corpus.load_manifest(tmp_path / "c" / "manifest.tsv")) == 4


class TestPrepare:
    def test_renders_tokens(self, tmp_path, capsys):
        code = main(["prepare", "--text", "koon", "--out", str(tmp_path),
                     "--ratio", "1.5"])
        assert code == 0
        assert (tmp_path / "render.pgm").exists()
        assert (tmp_path / "stretched.pgm").exists()
        assert (tmp_path / "token_00.pgm").exists()
        out = capsys.readouterr().out
        assert "width=144px" in out  # round(96 * 1.5)


class TestSynth:
    def test_happy_path_writes_wav(self, tmp_path, crafted_ckpt, capsys):
        out_wav = tmp_path / "o.wav"
        code = main(["synth", "--text", "koon", "--ratio", "2.0", "--label", "bat",
                     "--ckpt", str(crafted_ckpt), "--out", str(out_wav)])
        assert code == 0
        samples, sr = dsp.load_wav(out_wav)
        assert sr == 16000
        assert len(samples) > 0

    def test_unknown_label_exit_two(self, tmp_path, crafted_ckpt):
        assert main(["synth", "--text", "koon", "--label", "piano",
                     "--ckpt", str(crafted_ckpt),
                     "--out", str(tmp_path / "x.wav")]) == 2

    def test_save_mel(self, tmp_path, crafted_ckpt):
        out_mel = tmp_path / "o.mel"
        code = main(["synth", "--text", "koon", "--label", "bell",
                     "--ckpt", str(crafted_ckpt), "--out", str(tmp_path / "o.wav"),
                     "--save-mel", str(out_mel)])
        assert code == 0
        mel = dsp.read_mel(out_mel, TINY_DSP)
        assert mel.n_frames > 0


class TestConfigHandling:
    def test_print_config_is_json(self, capsys):
        code = main(["train", "--manifest", "m.tsv", "--out", "o",
                     "--print-config"])
        assert code == 0
        effective = json.loads(capsys.readouterr().out)
        assert effective["lr"] == 0.001
        assert effective["min_confidence"] == 3

    def test_config_file_overrides_defaults_flags_win(self, tmp_path, capsys):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"epochs": 7, "lr": 0.5}))
        code = main(["train", "--manifest", "m.tsv", "--out", "o",
                     "--config", str(config), "--lr", "0.25", "--print-config"])
        assert code == 0
        effective = json.loads(capsys.readouterr().out)
        assert effective["epochs"] == 7    # from config file
        assert effective["lr"] == 0.25     # flag wins

    def test_unknown_config_key_rejected(self, tmp_path):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"nonsense": 1}))
        assert main(["train", "--manifest", "m.tsv", "--out", "o",
                     "--config", str(config)]) == 2

    def test_every_subcommand_has_seed(self):
        from glyphwave.cli import build_parser
        _, subs = build_parser()
        for name, sub in subs.items():
            dests = {a.dest for a in sub._actions}
            assert "seed" in dests, name


class TestEvalCommands:
    def test_eval_repetition_writes_csv_and_figure(self, tmp_path, corpus_dir,
                                                   crafted_ckpt):
        out = tmp_path / "rep"
        code = main(["eval-repetition", "--ckpt-aug", str(crafted_ckpt),
                     "--ckpt-noaug", str(crafted_ckpt),
                     "--manifest", str(corpus_dir / "manifest.tsv"),
                     "--out", str(out), "--word-max", "1", "--char-max", "2",
                     "--max-cases", "2"])
        assert code == 0
        assert (out / "repetition.csv").exists()
        assert (out / "repetition.png").read_bytes()[:4] == b"\x89PNG"

    def test_eval_stretch_no_figures(self, tmp_path, corpus_dir, crafted_ckpt):
        out = tmp_path / "st"
        code = main(["eval-stretch", "--ckpt", str(crafted_ckpt),
                     "--manifest", str(corpus_dir / "manifest.tsv"),
                     "--out", str(out), "--ratios", "0.5,1.0",
                     "--max-cases", "2", "--no-figures"])
        assert code == 0
        assert (out / "stretch.csv").exists()
        assert not (out / "stretch.png").exists()

    def test_eval_diversity(self, tmp_path, corpus_dir, crafted_ckpt):
        out = tmp_path / "div"
        code = main(["eval-diversity", "--ckpt-image", str(crafted_ckpt),
                     "--ckpt-label", str(crafted_ckpt),
                     "--manifest", str(corpus_dir / "manifest.tsv"),
                     "--out", str(out), "--label", "bell", "--n-images", "3",
                     "--n-texts", "2"])
        assert code == 0
        assert (out / "diversity.csv").exists()
        assert (out / "diversity.png").exists()


class TestGradCheckCommand:
    def test_passes(self, capsys):
        assert main(["grad-check", "--samples", "25", "--seed", "2"]) == 0
        assert "passed" in capsys.readouterr().out


class TestPlotData:
    def test_long_format_output(self, tmp_path, capsys):
        from glyphwave.evaluate import write_experiment_csv
        path = tmp_path / "stretch.csv"
        write_experiment_csv(path, ["ratio", "mean_rel_duration", "std_rel_duration"],
                             [(1.0, 1.0, 0.0)], "stretch",
                             {"slope": 1, "intercept": 0, "r2": 1})
        assert main(["plotdata", "--csv", str(path)]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0] == "series,x,y"
        assert "stretch,1,1" in out
