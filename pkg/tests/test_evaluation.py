import logging

import numpy as np
import pytest
from scipy.stats import norm

from giftlab.core import make_rng
from giftlab.data import Utterance
from giftlab.errors import ConfigError, DataError, DimensionError
from giftlab.evaluation import (
    ScoreSet, Trial, bootstrap_ci, compare_systems, cosine_score, eer, extract_embeddings,
    make_trials, read_scores, read_trials, score_trials, write_det_csv, write_scores, write_trials,
)
from giftlab.models import ModelArch, build_stack


def brute_force_eer(tar, imp):
    # independent oracle: every candidate threshold, including +inf
    cands = np.concatenate([tar, imp, [np.inf]])
    best = 1.0
    for t in cands:
        far = np.mean(imp >= t)
        frr = np.mean(tar < t)
        best = min(best, max(far, frr))
    return best


def eval_utts(rng, n_spk=3, per=3, d_f=4):
    return [Utterance(f"s{s}-u{j}", f"s{s}", rng.normal(size=(5, d_f))) for s in range(n_spk) for j in range(per)]


def test_make_trials_balanced_and_valid():
    utts = eval_utts(make_rng(1))
    trials = make_trials(utts, 20, make_rng(2))
    assert sum(t.label for t in trials) == 10
    assert len(set(trials)) == 20
    spk = {u.utt_id: u.speaker_id for u in utts}
    for t in trials:
        assert (spk[t.enroll] == spk[t.test]) == bool(t.label)
    assert make_trials(utts, 20, make_rng(2)) == trials


def test_make_trials_exhaustion():
    utts = [Utterance(f"{s}-{j}", s, np.zeros((2, 1))) for s in "ab" for j in range(2)]
    # 4 ordered target pairs exist; n=2 asks for 1 of each
    trials = make_trials(utts, 2, make_rng(0))
    assert sorted(t.label for t in trials) == [0, 1]
    with pytest.raises(ConfigError, match="at most 9"):
        make_trials(utts, 10, make_rng(0))
    with pytest.raises(ConfigError):
        make_trials(utts[:2], 2, make_rng(0))


def test_trial_and_score_files_roundtrip(tmp_path):
    trials = [Trial("a", "b", 1), Trial("b", "c", 0)]
    write_trials(tmp_path / "t.txt", trials, ["seed=1"])
    assert (tmp_path / "t.txt").read_text().splitlines()[1] == "1 a b"
    assert read_trials(tmp_path / "t.txt") == trials
    ss = ScoreSet(trials, np.array([0.1234567890123, -0.5]))
    write_scores(tmp_path / "s.txt", ss)
    back = read_scores(tmp_path / "s.txt")
    assert back.trials == trials and np.array_equal(back.scores, ss.scores)
    (tmp_path / "bad.txt").write_text("2 a b\n")
    with pytest.raises(DataError):
        read_trials(tmp_path / "bad.txt")
    with pytest.raises(DataError):
        Trial("a", "a", 1)


def test_cosine_score(caplog):
    e = np.array([1.0, 2.0, -0.5])
    assert cosine_score(e, e) == pytest.approx(1.0)
    assert cosine_score(e, -e) == pytest.approx(-1.0)
    assert cosine_score(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    with caplog.at_level(logging.WARNING):
        assert cosine_score(np.zeros(3), e) == 0.0
    assert "zero-norm" in caplog.text
    with pytest.raises(DimensionError):
        cosine_score(e, np.ones(2))


def test_eer_perfect_separation():
    r = eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert r.eer == 0.0 and (r.n_target, r.n_impostor) == (2, 2)
    assert 0.1 <= r.threshold <= 0.9


def test_eer_requires_both_classes():
    with pytest.raises(DataError):
        eer([0.1, 0.2], [1, 1])


def test_eer_matches_brute_force_on_random_sets():
    rng = make_rng(10)
    for _ in range(200):
        n = int(rng.integers(10, 501))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.normal(size=n) + labels * rng.uniform(0, 2)
        r = eer(scores, labels)
        oracle = brute_force_eer(scores[labels == 1], scores[labels == 0])
        assert abs(r.eer - oracle) <= 1.0 / labels.sum() + 1e-12
        assert 0.0 <= r.eer <= 1.0
        assert scores.min() <= r.threshold <= scores.max()


def test_eer_with_ties_within_largest_step():
    # tied scores move several trials per threshold, so the bound is the largest jump
    rng = make_rng(20)
    for _ in range(100):
        n = int(rng.integers(10, 301))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.normal(size=n) + labels, 1)
        tar, imp = scores[labels == 1], scores[labels == 0]
        step = max(np.unique(tar, return_counts=True)[1].max() / tar.size,
                   np.unique(imp, return_counts=True)[1].max() / imp.size)
        r = eer(scores, labels)
        assert abs(r.eer - brute_force_eer(tar, imp)) <= step + 1e-12


def test_eer_identical_distributions():
    rng = make_rng(11)
    scores = rng.normal(size=20000)
    labels = np.repeat([1, 0], 10000)
    assert abs(eer(scores, labels).eer - 0.5) <= 0.02


def test_eer_invariant_under_monotone_maps():
    rng = make_rng(12)
    labels = rng.integers(0, 2, 300)
    labels[:2] = [0, 1]
    s = rng.normal(size=300) + labels
    base = eer(s, labels).eer
    for f in (np.exp, lambda x: 3 * x - 7, lambda x: np.arctan(x)):
        assert eer(f(s), labels).eer == pytest.approx(base, abs=1e-12)


def test_eer_mirror_symmetry():
    rng = make_rng(13)
    tar = rng.normal(1.0, 1.0, 400)
    imp = rng.normal(-1.0, 1.0, 400)
    a = eer(np.concatenate([tar, imp]), np.repeat([1, 0], 400)).eer
    # swap roles and mirror through 0: the same crossing
    b = eer(np.concatenate([-imp, -tar]), np.repeat([1, 0], 400)).eer
    assert a == pytest.approx(b, abs=1.0 / 400)


def test_bootstrap_ci_basic():
    rng = make_rng(14)
    assert bootstrap_ci([0.9, 0.8, 0.7, 0.1, 0.2, 0.0], [1, 1, 1, 0, 0, 0], 200, rng=rng) == (0.0, 0.0)
    labels = np.repeat([1, 0], 500)
    s = rng.normal(size=1000) + labels
    lo, hi = bootstrap_ci(s, labels, 300, rng=make_rng(1))
    assert lo <= eer(s, labels).eer <= hi
    assert bootstrap_ci(s, labels, 300, rng=make_rng(1)) == (lo, hi)
    with pytest.raises(ConfigError):
        bootstrap_ci(s, labels)


def test_bootstrap_width_shrinks_with_trials():
    ratios = []
    for seed in range(5):
        rng = make_rng(100 + seed)
        widths = []
        for n in (200, 2000):
            labels = np.repeat([1, 0], n // 2)
            s = rng.normal(size=n) + 1.5 * labels
            lo, hi = bootstrap_ci(s, labels, 200, rng=rng)
            widths.append(hi - lo)
        ratios.append(widths[1] / widths[0])
    # about 1/sqrt(10) in theory
    assert np.median(ratios) < 0.6


def test_compare_systems_trivial_cases():
    trials = [Trial(f"e{i}", f"t{i}", i % 2) for i in range(200)]
    labels = np.array([t.label for t in trials])
    rng = make_rng(15)
    chance = ScoreSet(trials, rng.normal(size=200))
    perfect = ScoreSet(trials, labels + 0.01 * rng.random(200))
    same = compare_systems(chance, chance, 200, make_rng(1))
    assert same.delta_eer == 0.0 and same.better == "tie" and same.ci == (0.0, 0.0)
    c = compare_systems(perfect, chance, 200, make_rng(1))
    assert c.better == "a" and c.significant and c.delta_eer < -0.3
    other = ScoreSet(trials[::-1], chance.scores)
    with pytest.raises(DataError):
        compare_systems(chance, other, 10, make_rng(1))


def test_compare_systems_coverage_meta_simulation():
    # Gaussian scores with equal class variances: true EER = Phi(-mu / (2 sd))
    mu_a, mu_b, n = 2.0, 1.8, 1000
    truth = _true_delta(mu_a, mu_b)
    rng = make_rng(16)
    covered = 0
    for _ in range(100):
        labels = np.repeat([1, 0], n // 2)
        noise = rng.normal(size=n)
        trials = [Trial(f"e{i}", f"t{i}", int(l)) for i, l in enumerate(labels)]
        # shared noise makes the systems paired, as on a common trial list
        a = ScoreSet(trials, noise + mu_a * labels + 0.5 * rng.normal(size=n))
        b = ScoreSet(trials, noise + mu_b * labels + 0.5 * rng.normal(size=n))
        c = compare_systems(a, b, 200, rng)
        covered += c.ci[0] <= truth <= c.ci[1]
    assert covered >= 90, (covered, truth)


def _true_delta(mu_a, mu_b):
    # score = noise + mu*label + 0.5*e has sd sqrt(1.25) in both classes
    sd = np.sqrt(1.25)
    return norm.cdf(-mu_a / (2 * sd)) - norm.cdf(-mu_b / (2 * sd))


def test_extract_embeddings_tap_rule_and_purity():
    rng = make_rng(17)
    utts = eval_utts(rng, d_f=3) + [Utterance("dup", "s0", None)]
    utts[-1].frames = utts[0].frames.copy()
    small = dict(d_f=3, h_f=4, L_f=2, d_e=5, h_a=3, d_a=2, n_speakers=3)
    plain = build_stack(ModelArch(adapter="none", **small), make_rng(1))
    glu = build_stack(ModelArch(adapter="glu", **small), make_rng(1))
    e_plain = extract_embeddings(plain, utts)
    e_glu = extract_embeddings(glu, utts)
    assert e_plain["s0-u0"].shape == (5,) and e_glu["s0-u0"].shape == (2,)
    e_out, _, _ = plain.forward_utterance(utts[1].frames)
    np.testing.assert_allclose(e_plain[utts[1].utt_id], e_out, rtol=0, atol=1e-12)
    assert np.array_equal(e_glu["dup"], e_glu["s0-u0"])
    again = extract_embeddings(glu, utts)
    assert all(np.array_equal(again[k], v) for k, v in e_glu.items())
    with pytest.raises(DimensionError):
        extract_embeddings(glu, [Utterance("w", "s", np.zeros((4, 7)))])


def test_score_trials_and_det_csv(tmp_path):
    emb = {"a": np.array([1.0, 0.0]), "b": np.array([1.0, 1.0]), "c": np.array([-1.0, 0.0])}
    ss = score_trials([Trial("a", "b", 1), Trial("a", "c", 0)], emb)
    np.testing.assert_allclose(ss.scores, [np.sqrt(0.5), -1.0])
    with pytest.raises(DataError, match="zz"):
        score_trials([Trial("a", "zz", 1)], emb)
    write_det_csv(tmp_path / "det.csv", ss, header=["seed=3"])
    lines = (tmp_path / "det.csv").read_text().splitlines()
    assert lines[0] == "# seed=3" and lines[1] == "threshold,far,frr" and len(lines) == 4
