import numpy as np
import pytest

from glyphwave import corpus, dsp
from glyphwave.model import ModelConfig


TINY_MODEL = ModelConfig(d_model=32, n_enc_layers=1, n_dec_layers=1, d_ff=48,
                         dp_hidden=24, conv_channels=(4, 6), n_mels=20)

TINY_DSP = dsp.DspConfig(sample_rate=16000, frame_length=512, hop=128, n_mels=20)


@pytest.fixture(scope="session")
def basic_corpus(tmp_path_factory):
    """Small deterministic corpus shared by read-only tests."""
    root = tmp_path_factory.mktemp("basic_corpus")
    spec = corpus.preset_spec("basic", records_per_class=4)
    manifest = corpus.generate_synthetic_corpus(spec, root, seed=11)
    return manifest


def make_tone(freq: float, duration: float, sr: int, amp: float = 0.5) -> np.ndarray:
    t = np.arange(int(round(duration * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def naive_dft_magnitude(x: np.ndarray, n_bins: int) -> np.ndarray:
    """|DFT| by explicit summation; the fft-free oracle."""
    n = len(x)
    t = np.arange(n)
    out = np.empty(n_bins)
    for k in range(n_bins):
        re = float(np.sum(x * np.cos(-2.0 * np.pi * k * t / n)))
        im = float(np.sum(x * np.sin(-2.0 * np.pi * k * t / n)))
        out[k] = np.hypot(re, im)
    return out
