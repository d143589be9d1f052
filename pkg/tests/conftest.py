import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rebq.backbone import BackboneConfig, PretrainConfig, pretrain
from rebq.bench import SynthConfig, build_stream, synth_generate

TINY = BackboneConfig(embed_dim=32, num_layers=2, num_heads=2, text_vocab_size=64,
                      max_text_len=8, num_patches=4, patch_dim=6, pretrain_classes=4)

TINY_SYNTH = SynthConfig(vocab_size=64, max_text_len=8, num_patches=4, patch_dim=6,
                         tokens_per_class=5, noise_token_prob=0.1, patch_noise_std=0.3)


@pytest.fixture(scope="session")
def tiny_backbone():
    corpus = synth_generate(TINY.pretrain_classes, 40, TINY_SYNTH, seed=111)
    model, report = pretrain(TINY, corpus, seed=112,
                             pcfg=PretrainConfig(steps=400, batch_size=16, eval_every=50))
    assert report.usable, f"fixture backbone unusable (accuracy {report.accuracy})"
    return model


@pytest.fixture(scope="session")
def tiny_benchmark():
    """4 classes, 2 sessions, eta=50 both-missing."""
    meta, samples = synth_generate(4, 30, TINY_SYNTH, seed=211)
    stream = build_stream(meta, samples, 2, 50.0, "both-missing",
                          split_seed=212, mask_seed=213)
    return meta, stream


@pytest.fixture()
def complete_samples():
    _, samples = synth_generate(4, 6, TINY_SYNTH, seed=311)
    return samples
