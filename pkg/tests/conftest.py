import numpy as np
import pytest
import torch

from zsmstm.data import Sample, WordFeature
from zsmstm.synthetic import SynthConfig, gen_sample, gen_script, gen_speaker

torch.set_num_threads(1)


def make_sample(W=3, T=64, J=10, d_text=12, n_mels=32, seed=0, speaker="spk", mel_frames=16):
    rng = np.random.default_rng(seed)
    cuts = np.linspace(0, T, W + 1).astype(int)
    words = [WordFeature(rng.normal(size=d_text).astype(np.float32),
                         rng.normal(size=(mel_frames + w, n_mels)).astype(np.float32)) for w in range(W)]
    return Sample(speaker, words, rng.normal(size=(T, 2 * J)).astype(np.float32),
                  [(int(a), int(b)) for a, b in zip(cuts[:-1], cuts[1:])])


@pytest.fixture
def sample():
    return make_sample()


@pytest.fixture
def small_synth():
    return SynthConfig(J=10, T=32, n_mels=32, d_text=16)


@pytest.fixture
def synth_samples(small_synth):
    out = []
    for k in range(2):
        style = gen_speaker(k, small_synth.J, small_synth.n_mels)
        out += [gen_sample(style, gen_script(10 * k + i, small_synth), i, small_synth, f"spk{k}") for i in range(6)]
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
