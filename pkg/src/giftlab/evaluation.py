"""Verification trials, cosine scoring, EER and bootstrap intervals.

Text formats (whitespace separated, LF terminated, ``#`` lines are comments):

* trial list: ``label enroll_utt test_utt`` with label 1 (target) or 0 (impostor)
* score dump: ``enroll_utt test_utt label score``
* DET points CSV: ``threshold,far,frr``
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Rng, Tensor
from .data import Utterance
from .errors import ArtifactIOError, ConfigError, DataError, DimensionError
from .models import ModelStack

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    label: int  # 1 target, 0 impostor

    def __post_init__(self):
        if self.enroll == self.test:
            raise DataError(f"trial compares {self.enroll} with itself")
        if self.label not in (0, 1):
            raise DataError(f"trial label must be 0 or 1, got {self.label!r}")


def make_trials(utterances: Sequence[Utterance], n_trials: int, rng: Rng) -> list[Trial]:
    """Sample ``n_trials`` distinct ordered pairs, half target and half impostor.

    With an odd count the extra trial is an impostor.
    """
    ids = [u.utt_id for u in utterances]
    spk = np.array([u.speaker_id for u in utterances])
    if len(set(spk)) < 2:
        raise ConfigError("trial generation needs at least 2 speakers")
    n_tar, n_imp = n_trials // 2, n_trials - n_trials // 2
    n = len(ids)
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    same = spk[i] == spk[j]
    tar_pairs = np.flatnonzero(same)
    imp_pairs = np.flatnonzero(~same)
    if n_tar > tar_pairs.size or n_imp > imp_pairs.size:
        best = 2 * min(tar_pairs.size, imp_pairs.size) + (imp_pairs.size > tar_pairs.size)
        raise ConfigError(
            f"cannot draw {n_trials} balanced trials: {tar_pairs.size} target and "
            f"{imp_pairs.size} impostor ordered pairs exist; at most {best} trials are possible"
        )
    chosen_t = np.sort(rng.choice(tar_pairs, size=n_tar, replace=False))
    chosen_i = np.sort(rng.choice(imp_pairs, size=n_imp, replace=False))
    trials = [Trial(ids[i[k]], ids[j[k]], 1) for k in chosen_t]
    trials += [Trial(ids[i[k]], ids[j[k]], 0) for k in chosen_i]
    return [trials[k] for k in rng.permutation(len(trials))]


def write_trials(path, trials: Sequence[Trial], header: Sequence[str] = ()) -> None:
    lines = [f"# {h}" for h in header] + [f"{t.label} {t.enroll} {t.test}" for t in trials]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trials(path) -> list[Trial]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read trial list {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: expected 'label enroll_utt test_utt'")
        out.append(Trial(parts[1], parts[2], int(parts[0])))
    return out


def extract_embeddings(stack: ModelStack, utterances: Sequence[Utterance], batch_size: int = 64) -> dict[str, Tensor]:
    """Map utt_id to its speaker embedding (A_out with an adapter, else E_out)."""
    out: dict[str, Tensor] = {}
    d_f = stack.arch.d_f
    for u in utterances:
        if u.frames.ndim != 2 or u.frames.shape[1] != d_f:
            raise DimensionError(f"utterance {u.utt_id} has frame width {u.frames.shape[-1]}, model expects {d_f}")
    for start in range(0, len(utterances), batch_size):
        chunk = utterances[start:start + batch_size]
        emb = stack.embed([u.frames for u in chunk])
        for u, e in zip(chunk, emb):
            out[u.utt_id] = e.copy()
    return out


def cosine_score(e1: Tensor, e2: Tensor) -> float:
    if e1.shape != e2.shape:
        raise DimensionError(f"cannot score embeddings of shapes {e1.shape} and {e2.shape}")
    n1, n2 = float(np.linalg.norm(e1)), float(np.linalg.norm(e2))
    if n1 == 0.0 or n2 == 0.0:
        log.warning("zero-norm embedding in cosine scoring; score set to 0")
        return 0.0
    return float(np.dot(e1, e2) / (n1 * n2))


@dataclass
class ScoreSet:
    trials: list[Trial]
    scores: Tensor

    @property
    def labels(self) -> Tensor:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    def same_trials(self, other: "ScoreSet") -> bool:
        return self.trials == other.trials


def score_trials(trials: Sequence[Trial], embeddings: Mapping[str, Tensor]) -> ScoreSet:
    scores = np.empty(len(trials))
    for k, t in enumerate(trials):
        for uid in (t.enroll, t.test):
            if uid not in embeddings:
                raise DataError(f"no embedding for utterance {uid}")
        scores[k] = cosine_score(embeddings[t.enroll], embeddings[t.test])
    return ScoreSet(list(trials), scores)


def write_scores(path, scoreset: ScoreSet, header: Sequence[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines += [f"{t.enroll} {t.test} {t.label} {s!r}" for t, s in zip(scoreset.trials, scoreset.scores.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path) -> ScoreSet:
    trials, scores = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 'enroll test label score'")
        trials.append(Trial(parts[0], parts[1], int(parts[2])))
        scores.append(float(parts[3]))
    return ScoreSet(trials, np.array(scores))


@dataclass
class EerResult:
    eer: float
    threshold: float
    n_target: int
    n_impostor: int


def _split(scores, labels) -> tuple[Tensor, Tensor]:
    if isinstance(scores, ScoreSet):
        scores, labels = scores.scores, scores.labels
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DataError(f"{scores.size} scores but {labels.size} labels")
    tar, imp = scores[labels == 1], scores[labels == 0]
    if tar.size == 0 or imp.size == 0:
        raise DataError("EER needs at least one target and one impostor trial")
    return np.sort(tar), np.sort(imp)


def error_rates(tar: Tensor, imp: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """FAR and FRR at every distinct score (inputs sorted ascending)."""
    thresholds = np.unique(np.concatenate([tar, imp]))
    far = 1.0 - np.searchsorted(imp, thresholds, side="left") / imp.size
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    return thresholds, far, frr


def _eer_sorted(tar: Tensor, imp: Tensor) -> tuple[float, float]:
    thr, far, frr = error_rates(tar, imp)
    # past the top score everything is rejected
    thr = np.append(thr, thr[-1])
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    d = far - frr  # nonincreasing, d[0] > 0, d[-1] < 0
    k = int(np.argmax(d <= 0))
    if d[k] == 0:
        return float(far[k]), float(thr[k])
    alpha = d[k - 1] / (d[k - 1] - d[k])
    rate = far[k - 1] + alpha * (far[k] - far[k - 1])
    return float(rate), float(thr[k - 1] + alpha * (thr[k] - thr[k - 1]))


def eer(scores, labels=None) -> EerResult:
    """Equal error rate by linear interpolation where FAR - FRR changes sign."""
    tar, imp = _split(scores, labels)
    rate, threshold = _eer_sorted(tar, imp)
    return EerResult(rate, threshold, int(tar.size), int(imp.size))


def det_points(scores, labels=None) -> tuple[Tensor, Tensor, Tensor]:
    return error_rates(*_split(scores, labels))


def write_det_csv(path, scores, labels=None, header: Sequence[str] = ()) -> None:
    thr, far, frr = det_points(scores, labels)
    lines = [f"# {h}" for h in header] + ["threshold,far,frr"] + [f"{t!r},{a!r},{r!r}" for t, a, r in zip(thr.tolist(), far.tolist(), frr.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resample_indices(labels: Tensor, rng: Rng) -> Tensor:
    # stratified: each resample keeps the original target/impostor counts
    tar = np.flatnonzero(labels == 1)
    imp = np.flatnonzero(labels == 0)
    return np.concatenate([rng.choice(tar, tar.size), rng.choice(imp, imp.size)])


def bootstrap_ci(scores, labels=None, n_boot: int = 1000, level: float = 0.95, rng: Rng | None = None) -> tuple[float, float]:
    """Percentile interval of EER over trial resamples."""
    if isinstance(scores, ScoreSet):
        scores, labels = scores.scores, scores.labels
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    _split(scores, labels)
    if rng is None:
        raise ConfigError("bootstrap_ci needs an explicit rng")
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = _resample_indices(labels, rng)
        boots[b] = _eer_sorted(np.sort(scores[idx][labels[idx] == 1]), np.sort(scores[idx][labels[idx] == 0]))[0]
    tail = (1.0 - level) / 2
    lo, hi = np.quantile(boots, [tail, 1.0 - tail])
    return float(lo), float(hi)


@dataclass
class Comparison:
    delta_eer: float  # eer(a) - eer(b); negative means a is better
    ci: tuple[float, float]
    better: str  # "a", "b" or "tie"

    @property
    def significant(self) -> bool:
        return self.better != "tie"


def compare_systems(a: ScoreSet, b: ScoreSet, n_boot: int = 1000, rng: Rng | None = None, level: float = 0.95) -> Comparison:
    """Paired bootstrap of the EER difference over a shared trial list."""
    if not a.same_trials(b):
        raise DataError("compare_systems needs both systems scored on the same trial list")
    if rng is None:
        raise ConfigError("compare_systems needs an explicit rng")
    labels = a.labels
    delta = eer(a).eer - eer(b).eer
    diffs = np.empty(n_boot)
    for k in range(n_boot):
        idx = _resample_indices(labels, rng)
        lab = labels[idx]
        ea = _eer_sorted(np.sort(a.scores[idx][lab == 1]), np.sort(a.scores[idx][lab == 0]))[0]
        eb = _eer_sorted(np.sort(b.scores[idx][lab == 1]), np.sort(b.scores[idx][lab == 0]))[0]
        diffs[k] = ea - eb
    tail = (1.0 - level) / 2
    lo, hi = (float(v) for v in np.quantile(diffs, [tail, 1.0 - tail]))
    better = "a" if hi < 0 else "b" if lo > 0 else "tie"
    return Comparison(float(delta), (lo, hi), better)
