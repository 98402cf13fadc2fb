import numpy as np
import pytest

from glyphwave import corpus, dsp, train
from glyphwave.autodiff import Tensor
from glyphwave.errors import DataError
from glyphwave.model import (AcousticModel, ModelConfig, ShapeMismatch, UnknownLabel,
                             init_params, null_event_feature)
from glyphwave.train import (Adam, Checkpoint, NonFiniteLoss, PipelineConfig,
                             TrainConfig, compute_loss, gradient_check, load_checkpoint,
                             prepare_dataset, save_checkpoint, synthesize)

from conftest import TINY_DSP, TINY_MODEL


@pytest.fixture(scope="module")
def micro_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro")
    spec = corpus.GeneratorSpec(classes=(
        corpus.EventClassSpec("bell", "decay_sine", 880.0, "k", "o", "n",
                              duration_range=(0.6, 0.9)),
        corpus.EventClassSpec("drum", "noise_burst", 300.0, "d", "a", "n",
                              duration_range=(0.6, 0.9)),
    ), records_per_class=5, low_confidence_prob=0.0)
    return corpus.generate_synthetic_corpus(spec, root, seed=21)


def tiny_pipeline(**kw):
    return PipelineConfig(dsp=TINY_DSP, min_confidence=1, **kw)


class TestComputeLoss:
    def _pair(self, seed=0):
        rng = np.random.default_rng(seed)
        pred_mel = Tensor(rng.normal(0, 1, (6, 5)))
        target_mel = rng.normal(0, 1, (6, 5))
        pred_dur = Tensor(rng.normal(0, 1, 3))
        target_dur = np.array([2, 3, 1])
        return pred_mel, target_mel, pred_dur, target_dur

    def test_zero_when_equal(self):
        mel = np.random.default_rng(1).normal(0, 1, (4, 3))
        durations = np.array([1, 2])
        logdur = np.log(durations + 1.0)
        total, breakdown = compute_loss(Tensor(mel.copy()), mel, Tensor(logdur),
                                        durations)
        assert breakdown.total == pytest.approx(0.0, abs=1e-12)

    def test_constant_offset_squares(self):
        mel = np.zeros((4, 3))
        total, breakdown = compute_loss(Tensor(mel + 0.5), mel,
                                        Tensor(np.log([3.0])), np.array([2]))
        assert breakdown.mel_mse == pytest.approx(0.25)
        assert breakdown.duration_mse == pytest.approx(0.0, abs=1e-12)

    def test_matches_scalar_loop_oracle(self):
        pred_mel, target_mel, pred_dur, target_dur = self._pair()
        _, breakdown = compute_loss(pred_mel, target_mel, pred_dur, target_dur)
        mel_sum = 0.0
        for i in range(6):
            for j in range(5):
                mel_sum += (float(pred_mel.data[i, j]) - float(target_mel[i, j])) ** 2
        dur_sum = 0.0
        for i in range(3):
            dur_sum += (float(pred_dur.data[i]) - np.log(target_dur[i] + 1.0)) ** 2
        assert breakdown.mel_mse == pytest.approx(mel_sum / 30)
        assert breakdown.duration_mse == pytest.approx(dur_sum / 3)

    def test_mask_restricts_mean(self):
        pred_mel, target_mel, pred_dur, target_dur = self._pair(2)
        mask = np.array([True, True, False, False, True, False])
        _, masked = compute_loss(pred_mel, target_mel, pred_dur, target_dur,
                                 mel_mask=mask)
        manual = float(np.mean((pred_mel.data[mask] - target_mel[mask]) ** 2))
        assert masked.mel_mse == pytest.approx(manual)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            compute_loss(Tensor(np.zeros((3, 2))), np.zeros((4, 2)),
                         Tensor(np.zeros(2)), np.array([1, 1]))

    def test_total_is_sum(self):
        _, breakdown = compute_loss(*self._pair(3))
        assert breakdown.total == pytest.approx(breakdown.mel_mse
                                                + breakdown.duration_mse)


class TestAdam:
    def test_zero_lr_is_bitwise_noop(self):
        params = init_params(TINY_MODEL, seed=0)
        before = {name: t.data.copy() for name, t in params.items()}
        optimizer = Adam(params, TrainConfig(learning_rate=0.0))
        for _, tensor in params.items():
            tensor.grad = np.ones_like(tensor.data)
        optimizer.step()
        for name, tensor in params.items():
            assert np.array_equal(tensor.data, before[name])

    def test_clip_bounds_applied_norm(self):
        params = init_params(TINY_MODEL, seed=0)
        clip = 1.0
        optimizer = Adam(params, TrainConfig(grad_clip=clip))
        rng = np.random.default_rng(0)
        for _, tensor in params.items():
            tensor.grad = rng.normal(0, 5, tensor.data.shape).astype(tensor.data.dtype)
        pre_norm = optimizer.step()
        assert pre_norm > clip
        assert optimizer.last_clipped_norm <= clip + 1e-9

    def test_no_clip_below_threshold(self):
        params = init_params(TINY_MODEL, seed=0)
        optimizer = Adam(params, TrainConfig(grad_clip=100.0))
        for _, tensor in params.items():
            tensor.grad = np.full_like(tensor.data, 1e-3)
        pre_norm = optimizer.step()
        assert optimizer.last_clipped_norm == pytest.approx(pre_norm)

    def test_step_moves_against_gradient(self):
        params = init_params(TINY_MODEL, seed=0)
        before = params.flat()
        optimizer = Adam(params, TrainConfig(learning_rate=0.01, grad_clip=None))
        for _, tensor in params.items():
            tensor.grad = np.ones_like(tensor.data)
        optimizer.step()
        assert (params.flat() < before).all()


class TestCheckpoint:
    def test_roundtrip_forward_bit_identical(self, tmp_path):
        config = ModelConfig(d_model=16, n_enc_layers=1, n_dec_layers=1, d_ff=16,
                             dp_hidden=8, conv_channels=(2, 4), n_mels=8,
                             event_labels=("bell",))
        params = init_params(config, seed=4)
        meta = {"dsp": TINY_DSP.to_dict(), "glyph_seed": 0, "cluster_rates": {},
                "event_source": "label", "embedder_seed": 0, "sample_rate": 16000,
                "stretch_mode": "none", "seed": 4}
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params, config, meta)
        loaded = load_checkpoint(path)
        assert loaded.model_config == config
        assert loaded.meta == meta

        toks = np.random.default_rng(0).random((3, 24, 24)).astype(np.float32)
        durations = np.array([2, 2, 2])
        before = AcousticModel(config, params).forward(toks, "bell", durations)
        after = loaded.model().forward(toks, "bell", durations)
        assert np.array_equal(before.mel.data, after.mel.data)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"nothing to see")
        with pytest.raises(DataError):
            load_checkpoint(path)


class TestTrainLoop:
    def test_missing_alignment_names_record(self, tmp_path, micro_corpus):
        stripped = corpus.CorpusManifest(
            records=tuple(corpus.OnomatopoeiaRecord(
                id=r.id, text=r.text, audio_path=r.audio_path,
                event_label=r.event_label, confidence=r.confidence,
                alignment_path=None) for r in micro_corpus.records),
            clusters=micro_corpus.clusters, sample_rate=micro_corpus.sample_rate)
        with pytest.raises(DataError) as err:
            train.train(stripped, TINY_MODEL, tiny_pipeline(),
                        TrainConfig(epochs=1), tmp_path / "run")
        assert "bell000" in str(err.value)

    def test_empty_after_filter(self, tmp_path, micro_corpus):
        capped = corpus.CorpusManifest(
            records=tuple(corpus.OnomatopoeiaRecord(
                id=r.id, text=r.text, audio_path=r.audio_path,
                event_label=r.event_label, confidence=min(r.confidence, 4),
                alignment_path=r.alignment_path) for r in micro_corpus.records),
            clusters=micro_corpus.clusters, sample_rate=micro_corpus.sample_rate)
        pipeline = PipelineConfig(dsp=TINY_DSP, min_confidence=5)
        with pytest.raises(DataError):
            train.train(capped, TINY_MODEL, pipeline,
                        TrainConfig(epochs=1), tmp_path / "run")

    def test_same_seed_identical_curves_and_checkpoints(self, tmp_path, micro_corpus):
        config = TrainConfig(epochs=2, batch_size=4, seed=3)
        a = train.train(micro_corpus, TINY_MODEL, tiny_pipeline(), config,
                        tmp_path / "a")
        b = train.train(micro_corpus, TINY_MODEL, tiny_pipeline(), config,
                        tmp_path / "b")
        assert a.metrics == b.metrics
        assert (a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes())

    def test_metrics_csv_schema(self, tmp_path, micro_corpus):
        result = train.train(micro_corpus, TINY_MODEL, tiny_pipeline(),
                             TrainConfig(epochs=2, batch_size=4), tmp_path / "run")
        lines = result.metrics_path.read_text().splitlines()
        assert lines[0] == "epoch,mel_mse,duration_mse,total,val_total"
        assert len(lines) == 3

    def test_overfits_single_record(self, tmp_path, micro_corpus):
        single = corpus.CorpusManifest(records=micro_corpus.records[:1],
                                       clusters=corpus.build_clusters(
                                           micro_corpus.records[:1]),
                                       sample_rate=micro_corpus.sample_rate)
        result = train.train(
            single, TINY_MODEL, tiny_pipeline(),
            TrainConfig(epochs=200, batch_size=1, seed=0, val_fraction=0.0),
            tmp_path / "overfit")
        first = result.metrics[0]["mel_mse"]
        last = result.metrics[-1]["mel_mse"]
        assert last < 0.1 * first

    def test_nonfinite_loss_aborts(self, tmp_path, micro_corpus):
        with pytest.raises(NonFiniteLoss), np.errstate(all="ignore"):
            train.train(micro_corpus, TINY_MODEL, tiny_pipeline(),
                        TrainConfig(epochs=2, batch_size=4, learning_rate=1e6,
                                    grad_clip=None),
                        tmp_path / "blowup")


class TestPrepareDataset:
    def test_items_match_records(self, micro_corpus):
        items = prepare_dataset(micro_corpus, TINY_MODEL, tiny_pipeline())
        assert len(items) == len(micro_corpus)
        for item, rec in zip(items, micro_corpus.records):
            assert item.record_id == rec.id
            assert item.tokens.shape[0] == len(rec.text)
            assert item.durations.sum() == item.mel.shape[0]
            assert item.event == rec.event_label

    def test_duration_stretch_changes_token_count(self, micro_corpus):
        plain = prepare_dataset(micro_corpus, TINY_MODEL, tiny_pipeline())
        stretched = prepare_dataset(micro_corpus, TINY_MODEL,
                                    tiny_pipeline(stretch_mode="duration"))
        plain_counts = [i.tokens.shape[0] for i in plain]
        stretched_counts = [i.tokens.shape[0] for i in stretched]
        assert plain_counts != stretched_counts
        for item in stretched:
            assert item.durations.sum() == item.mel.shape[0]

    def test_image_events(self, micro_corpus):
        items = prepare_dataset(micro_corpus, TINY_MODEL,
                                tiny_pipeline(event_source="images"))
        vectors = {item.record_id: item.event.vector for item in items}
        assert len(vectors) == len(micro_corpus)
        some = list(vectors.values())
        assert not np.array_equal(some[0], some[1])


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, micro_corpus):
    out = tmp_path_factory.mktemp("synth_ckpt")
    result = train.train(micro_corpus, TINY_MODEL, tiny_pipeline(),
                         TrainConfig(epochs=8, batch_size=4, seed=1), out)
    return load_checkpoint(result.checkpoint_path)


class TestSynthesize:
    def test_ratio_one_equals_none(self, checkpoint):
        a = synthesize(checkpoint, "koon", stretch=None, event="bell", vocoder=False)
        b = synthesize(checkpoint, "koon", stretch=("ratio", 1.0), event="bell",
                       vocoder=False)
        assert np.array_equal(a.mel.frames, b.mel.frames)

    def test_unknown_label(self, checkpoint):
        with pytest.raises(UnknownLabel):
            synthesize(checkpoint, "koon", event="piano", vocoder=False)

    def test_duration_stretch_requires_known_rate(self, checkpoint):
        with pytest.raises(UnknownLabel):
            synthesize(checkpoint, "koon", stretch=("duration", 1.0),
                       event=null_event_feature(), vocoder=False)

    def test_vocoder_output_length(self, checkpoint):
        result = synthesize(checkpoint, "koon", event="bell")
        config = checkpoint.dsp_config
        expected = (result.mel.n_frames - 1) * config.hop + config.frame_length
        assert len(result.waveform) == expected
        assert result.sample_rate == config.sample_rate

    def test_duration_stretch_tracks_target(self, checkpoint):
        short = synthesize(checkpoint, "koon", stretch=("duration", 0.5),
                           event="bell", vocoder=False)
        longer = synthesize(checkpoint, "koon", stretch=("duration", 1.5),
                            event="bell", vocoder=False)
        assert longer.visual_width > short.visual_width


class TestGradientCheck:
    def test_composed_model_gradients(self):
        report = gradient_check(n_samples=40, seed=11)
        assert report.passed, f"max rel error {report.max_rel_error}"
        assert report.n_sampled == 40
