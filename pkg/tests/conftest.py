import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from shortframe.audio import CorpusSpec, make_synthetic_corpus  # noqa: E402
from shortframe.model import EnhancerModel  # noqa: E402

torch.set_num_threads(1)


def force_identity(model: EnhancerModel) -> EnhancerModel:
    """Mask saturated at 1 and an exactly zero phase residual."""
    with torch.no_grad():
        model.mag_out.weight.zero_()
        model.mag_out.bias.fill_(50.0)
        model.phase_out.weight.zero_()
        model.phase_out.bias.zero_()
    return model.eval()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A few seconds of synthetic audio: 10 train/val excerpts and 8 test excerpts."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    spec = CorpusSpec(n_clean=5, clean_seconds=4.0, n_noise=3, noise_seconds=4.0,
                      n_test_clean=4, test_snr_grid=[-5.0, 5.0])
    paths = make_synthetic_corpus(out, spec, seed=3)
    return out, paths


TINY_MODEL_TOML = """
[model]
mag_blocks = 1
mag_channels = 16
phase_blocks = 1
phase_channels = 12
kernel_size = 3
"""


def write_sweep_toml(path, corpus_paths, frame_ms, *, epochs=2, seed=0, out="out", estoi=False,
                     n_bootstrap=200, workers=1):
    """A small sweep config over the given synthetic corpus manifests."""
    path.write_text(f"""
seed = {seed}
out = "{out}"

[sweep]
frame_ms = {list(frame_ms)}
estoi = {str(estoi).lower()}
n_bootstrap = {n_bootstrap}
workers = {workers}
snr_fig_frame_ms = [{frame_ms[0]}]

[data]
trainval = "{corpus_paths['trainval']}"
test = "{corpus_paths['test']}"
{TINY_MODEL_TOML}
[train]
lr = 1e-3
batch_size = 4
max_epochs = {epochs}
patience = 10
""")
    return path
