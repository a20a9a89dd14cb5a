import numpy as np
import pytest

from ohubert.config import RunConfig
from ohubert.corpus import synth_corpus
from ohubert.labeler import label_corpus, save_labels
from ohubert.model import frame_count


def small_config(data=None, **extra) -> RunConfig:
    """A configuration small enough for unit tests (seconds, not minutes)."""
    sets = [
        "model.C=8", "model.n_layers=2", "model.d_model=32", "model.n_heads=2",
        "model.ffn_dim=64",
        "train.steps=12", "train.batch_sources=3", "train.segment_frames=16",
        "train.checkpoint_every=4", "train.dev_every=4", "train.dev_fraction=0.25",
        "train.queue_activation_step=4", "train.queue_sample=8", "train.usp_negatives=4",
    ]
    if data is not None:
        sets += [f'train.manifest="{data["dir"]}/manifest.jsonl"',
                 f'train.labels="{data["dir"]}/labels.jsonl"']
    sets += [f"{k}={v}" for k, v in extra.items()]
    return RunConfig().override(sets)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    manifest = synth_corpus(4, 4, 4, 0.8, 16000, seed=3, out_dir=out)
    audio = manifest.load_audio()
    cfg = small_config()
    cb, labels = label_corpus(audio, cfg.model.C, lambda n: frame_count(n, cfg.model), iters=20)
    save_labels(out / "labels.jsonl", labels)
    return {"dir": out, "manifest": manifest, "audio": audio, "labels": labels, "codebook": cb}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
