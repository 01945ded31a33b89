"""Domain-shift properties of the generator, measured through a source-pretrained model.

Desk defaults, 5 seeds; one pretraining per seed is shared by every shift
setting because the source split does not depend on the shift parameters.
"""
from dataclasses import replace

import numpy as np
import pytest

from giftlab import pipeline
from giftlab.config import ExperimentConfig
from giftlab.core import make_rng
from giftlab.data import CorpusConfig, DomainShiftConfig, _gen_split, _orthonormal, gen_corpus, make_domain_shift
from giftlab.evaluation import eer, extract_embeddings, make_trials, score_trials
from giftlab.models import load_checkpoint

SEEDS = (1, 2, 3, 4, 5)
STRENGTHS = (0.0, 0.5, 1.0)


def shifted(cfg: ExperimentConfig, strength: float) -> ExperimentConfig:
    # only the affine part moves; lengths and noise stay at the source values
    shift = DomainShiftConfig(shift_strength=strength, length_factor=1.0, noise_factor=1.0)
    return replace(cfg, data=replace(cfg.data, shift=shift))


def heldout_source(cfg: ExperimentConfig, data: CorpusConfig):
    """Unseen source-domain speakers drawn in the corpus's own speaker subspace."""
    rng = cfg.rng("data")
    make_domain_shift(data.shift, data.d_f, rng)
    basis = _orthonormal(rng, data.d_f)
    spec = data.target_eval
    _, utts = _gen_split(data, spec, "src-eval", "source", basis[:, :data.speaker_rank],
                         basis[:, data.speaker_rank:], None, make_rng(cfg.seed + 1000))
    return utts


def pct_eer(stack, utts, cfg):
    trials = make_trials(utts, cfg.eval.n_trials, cfg.rng("trials"))
    return 100.0 * eer(score_trials(trials, extract_embeddings(stack, utts))).eer


@pytest.fixture(scope="module")
def shift_eers(tmp_path_factory):
    work = tmp_path_factory.mktemp("shift")
    out = {}
    for seed in SEEDS:
        cfg = shifted(ExperimentConfig(seed=seed, workdir=str(work)), 0.0)
        pipeline.generate(cfg)
        stack = load_checkpoint(pipeline.do_pretrain(cfg))
        source = gen_corpus(cfg.data, cfg.rng("data")).source_train
        for s in STRENGTHS:
            c = shifted(cfg, s)
            corpus = gen_corpus(c.data, c.rng("data"))
            assert all(np.array_equal(a.frames, b.frames) for a, b in zip(corpus.source_train, source))
            out[seed, s] = pct_eer(stack, corpus.target_eval, c)
        out[seed, "source"] = pct_eer(stack, heldout_source(cfg, cfg.data), cfg)
    return out


def test_null_shift_matches_source_evaluation(shift_eers):
    gaps = [abs(shift_eers[k, 0.0] - shift_eers[k, "source"]) for k in SEEDS]
    assert np.median(gaps) < 2.0, gaps


def test_shift_degrades_monotonically(shift_eers):
    med = [np.median([shift_eers[k, s] for k in SEEDS]) for s in STRENGTHS]
    assert med[0] < med[1] < med[2], med
