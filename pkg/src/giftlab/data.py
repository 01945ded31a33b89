"""Synthetic source/target speaker corpora and the on-disk feature formats.

Generative model. Each speaker has a latent identity ``s = B z`` living in a
``speaker_rank``-dimensional subspace (``B`` has orthonormal columns, ``z`` is
standard normal scaled by ``speaker_scale``). Every utterance adds a channel
offset drawn in the orthogonal complement of that subspace (scaled by
``channel_scale``) and every frame adds isotropic noise (``noise_scale``)::

    frame = s + channel(utterance) + noise(frame)

Target-domain utterances are shorter (``length_factor``), noisier
(``noise_factor``) and mapped through ``x -> R x + offset`` where ``R`` is the
matrix exponential of a random unit-norm skew-symmetric generator scaled by
``shift_strength * rotation_angle`` (radians) and ``offset`` is a gaussian vector scaled by
``shift_strength * offset_scale``. ``shift_strength = 0`` gives R = I and no
offset.

Feature file ("GFT1"), little-endian::

    magic b"GFT1" | version u16 | frame dim u32 | utterance count u32
    per utterance: id len u16 | id UTF-8 | speaker len u16 | speaker UTF-8 |
                   frame count u32 | T*d_f float32, row-major

Manifest: one line per utterance ``utt_id speaker_id file offset`` where
``file`` is relative to the manifest's directory and ``offset`` is the byte
offset of the utterance record. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm

from .core import Rng, Tensor, gaussian
from .errors import ArtifactIOError, ConfigError, DataError, FormatError

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"GFT1"
FEATURE_VERSION = 1
_FILE_HEADER = struct.Struct("<4sHII")


@dataclass
class Speaker:
    id: str
    latent: Tensor
    domain: str


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    frames: Tensor

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class SplitSpec:
    n_speakers: int
    utts_per_speaker: int
    frame_range: tuple[int, int] = (30, 80)
    role: str = "train"

    def __post_init__(self):
        self.frame_range = tuple(int(v) for v in self.frame_range)
        lo, hi = self.frame_range
        if self.n_speakers < 1 or self.utts_per_speaker < 1:
            raise ConfigError("split sizes must be >= 1")
        if not 2 <= lo <= hi:
            raise ConfigError(f"frame_range must satisfy 2 <= min <= max, got {self.frame_range}")
        if self.role not in ("train", "eval"):
            raise ConfigError(f"split role must be train or eval, got {self.role!r}")


@dataclass
class DomainShiftConfig:
    shift_strength: float = 0.8
    offset_scale: float = 2.0
    rotation_angle: float = 0.8
    length_factor: float = 0.7
    noise_factor: float = 1.5

    def __post_init__(self):
        if self.shift_strength < 0 or self.offset_scale < 0 or self.rotation_angle < 0:
            raise ConfigError("shift_strength, offset_scale and rotation_angle must be >= 0")
        if not 0 < self.length_factor <= 1:
            raise ConfigError("length_factor must lie in (0, 1]")
        if self.noise_factor < 1:
            raise ConfigError("noise_factor must be >= 1")


@dataclass
class DomainShift:
    rotation: Tensor
    offset: Tensor
    length_factor: float
    noise_factor: float

    def apply(self, frames: Tensor) -> Tensor:
        return frames @ self.rotation.T + self.offset


@dataclass
class CorpusConfig:
    d_f: int = 24
    speaker_rank: int = 12
    speaker_scale: float = 1.0
    channel_scale: float = 2.0
    noise_scale: float = 1.0
    source_train: SplitSpec = field(default_factory=lambda: SplitSpec(200, 10, (30, 80), "train"))
    target_train: SplitSpec = field(default_factory=lambda: SplitSpec(30, 5, (30, 80), "train"))
    target_eval: SplitSpec = field(default_factory=lambda: SplitSpec(20, 10, (30, 80), "eval"))
    shift: DomainShiftConfig = field(default_factory=DomainShiftConfig)

    def __post_init__(self):
        if not 1 <= self.speaker_rank <= self.d_f:
            raise ConfigError("speaker_rank must lie in [1, d_f]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        for name in ("source_train", "target_train", "target_eval"):
            if name in d:
                d[name] = _strict(SplitSpec, d[name], f"data.{name}")
        if "shift" in d:
            d["shift"] = _strict(DomainShiftConfig, d["shift"], "data.shift")
        return cls(**d)


def _strict(cls, d, where: str):
    if isinstance(d, cls):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a table")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class Corpus:
    source_train: list[Utterance]
    target_train: list[Utterance]
    target_eval: list[Utterance]
    shift: DomainShift


def make_domain_shift(cfg: DomainShiftConfig, d_f: int, rng: Rng) -> DomainShift:
    a = gaussian(rng, (d_f, d_f))
    skew = a - a.T
    radius = np.max(np.abs(np.linalg.eigvals(skew)))
    skew = skew / radius if radius > 0 else skew
    rotation = expm(cfg.shift_strength * cfg.rotation_angle * skew)
    offset = gaussian(rng, d_f) * (cfg.shift_strength * cfg.offset_scale)
    return DomainShift(rotation, offset, cfg.length_factor, cfg.noise_factor)


def _orthonormal(rng: Rng, d: int) -> Tensor:
    q, r = np.linalg.qr(gaussian(rng, (d, d)))
    return q * np.sign(np.diag(r))


def _gen_split(
    cfg: CorpusConfig, spec: SplitSpec, prefix: str, domain: str,
    spk_basis: Tensor, chan_basis: Tensor, shift: DomainShift | None, rng: Rng,
) -> tuple[list[Speaker], list[Utterance]]:
    speakers, utts = [], []
    lo, hi = spec.frame_range
    for i in range(spec.n_speakers):
        z = gaussian(rng, spk_basis.shape[1], 0.0, cfg.speaker_scale)
        spk = Speaker(f"{prefix}{i:04d}", spk_basis @ z, domain)
        speakers.append(spk)
        for j in range(spec.utts_per_speaker):
            t = int(rng.integers(lo, hi + 1))
            noise = cfg.noise_scale
            if shift is not None:
                t = max(2, int(math.floor(t * shift.length_factor + 0.5)))
                noise *= shift.noise_factor
            chan = np.zeros(cfg.d_f)
            if chan_basis.shape[1]:
                chan = chan_basis @ gaussian(rng, chan_basis.shape[1], 0.0, cfg.channel_scale)
            frames = spk.latent + chan + gaussian(rng, (t, cfg.d_f), 0.0, noise)
            if shift is not None:
                frames = shift.apply(frames)
            utts.append(Utterance(f"{spk.id}-u{j:03d}", spk.id, frames))
    return speakers, utts


def gen_corpus(cfg: CorpusConfig, rng: Rng) -> Corpus:
    """Generate the source-train, target-train and target-eval splits."""
    shift = make_domain_shift(cfg.shift, cfg.d_f, rng)
    basis = _orthonormal(rng, cfg.d_f)
    spk_basis, chan_basis = basis[:, :cfg.speaker_rank], basis[:, cfg.speaker_rank:]
    _, src = _gen_split(cfg, cfg.source_train, "src", "source", spk_basis, chan_basis, None, rng)
    _, tr = _gen_split(cfg, cfg.target_train, "tgt-train", "target", spk_basis, chan_basis, shift, rng)
    _, ev = _gen_split(cfg, cfg.target_eval, "tgt-eval", "target", spk_basis, chan_basis, shift, rng)
    check_disjoint(tr, ev)
    check_disjoint(src, ev)
    return Corpus(src, tr, ev, shift)


def speakers_of(utts: Iterable[Utterance]) -> list[str]:
    return sorted({u.speaker_id for u in utts})


def check_disjoint(train: Sequence[Utterance], evaluation: Sequence[Utterance]) -> None:
    overlap = set(speakers_of(train)) & set(speakers_of(evaluation))
    if overlap:
        raise DataError(f"train and eval share speakers: {sorted(overlap)[:5]}")


def scaled_splits(utts: Sequence[Utterance], fractions: Sequence[float]) -> list[list[Utterance]]:
    """Nested per-speaker subsets keeping ``round(f * n)`` (at least 1) utterances each."""
    fractions = list(fractions)
    if not fractions or any(not 0 < f <= 1 for f in fractions) or fractions != sorted(fractions):
        raise ConfigError(f"fractions must be ascending in (0, 1], got {fractions}")
    by_spk: dict[str, list[Utterance]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u)
    out = []
    for f in fractions:
        keep: set[str] = set()
        for spk, lst in by_spk.items():
            k = int(math.floor(f * len(lst) + 0.5))
            if k < 1:
                log.warning("fraction %g leaves speaker %s with 0 utterances; keeping 1", f, spk)
                k = 1
            keep.update(u.utt_id for u in lst[:k])
        out.append([u for u in utts if u.utt_id in keep])
    return out


class Dataset:
    """Utterances with integer speaker labels in sorted-speaker order."""

    def __init__(self, utterances: Sequence[Utterance]):
        if not utterances:
            raise DataError("empty dataset")
        self.utterances = list(utterances)
        self.speakers = speakers_of(self.utterances)
        index = {s: i for i, s in enumerate(self.speakers)}
        self.labels = np.array([index[u.speaker_id] for u in self.utterances], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    @property
    def frame_dim(self) -> int:
        return int(self.utterances[0].frames.shape[1])


# -- GFT1 feature files --------------------------------------------------------

def encode_features(utterances: Sequence[Utterance], d_f: int | None = None) -> tuple[bytes, list[int]]:
    if d_f is None:
        d_f = int(utterances[0].frames.shape[1]) if utterances else 0
    parts = [_FILE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, d_f, len(utterances))]
    offsets, pos = [], _FILE_HEADER.size
    for u in utterances:
        if u.frames.ndim != 2 or u.frames.shape[1] != d_f:
            raise DataError(f"utterance {u.utt_id} has frame shape {u.frames.shape}, expected (T, {d_f})")
        uid, sid = u.utt_id.encode("utf-8"), u.speaker_id.encode("utf-8")
        rec = (
            struct.pack("<H", len(uid)) + uid + struct.pack("<H", len(sid)) + sid
            + struct.pack("<I", u.frames.shape[0]) + u.frames.astype("<f4").tobytes()
        )
        offsets.append(pos)
        parts.append(rec)
        pos += len(rec)
    return b"".join(parts), offsets


def write_features(path, utterances: Sequence[Utterance], d_f: int | None = None) -> list[int]:
    """Write a GFT1 file; returns the byte offset of each utterance record."""
    blob, offsets = encode_features(utterances, d_f)
    Path(path).write_bytes(blob)
    return offsets


def _need(data: bytes, pos: int, n: int, what: str) -> None:
    if pos + n > len(data):
        raise FormatError(f"truncated {what}", pos)


def parse_header(data: bytes) -> tuple[int, int]:
    _need(data, 0, _FILE_HEADER.size, "GFT1 header")
    magic, version, d_f, count = _FILE_HEADER.unpack_from(data, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad feature-file magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature-file version {version}", 4)
    return d_f, count


def parse_record(data: bytes, pos: int, d_f: int) -> tuple[Utterance, int]:
    ids = []
    for what in ("utterance id", "speaker id"):
        _need(data, pos, 2, f"{what} length")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        _need(data, pos, n, what)
        try:
            ids.append(data[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8", pos) from exc
        pos += n
    _need(data, pos, 4, "frame count")
    (t,) = struct.unpack_from("<I", data, pos)
    pos += 4
    _need(data, pos, 4 * t * d_f, f"frames of {ids[0]}")
    frames = np.frombuffer(data, dtype="<f4", count=t * d_f, offset=pos).astype(np.float64).reshape(t, d_f)
    if t < 2:
        raise FormatError(f"utterance {ids[0]} has {t} frames, need >= 2", pos - 4)
    if not np.all(np.isfinite(frames)):
        raise FormatError(f"utterance {ids[0]} contains non-finite frames", pos)
    return Utterance(ids[0], ids[1], frames), pos + 4 * t * d_f


def decode_features(data: bytes, d_f: int | None = None) -> list[Utterance]:
    file_d_f, count = parse_header(data)
    if d_f is not None and d_f != file_d_f:
        raise FormatError(f"frame dim {file_d_f} does not match expected {d_f}", 6)
    pos, out = _FILE_HEADER.size, []
    for _ in range(count):
        utt, pos = parse_record(data, pos, file_d_f)
        out.append(utt)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after {count} utterances", pos)
    return out


def read_features(path, d_f: int | None = None) -> list[Utterance]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read feature file {path}: {exc}") from exc
    return decode_features(data, d_f)


# -- manifests -----------------------------------------------------------------

@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: str
    file: str
    offset: int


def write_manifest(path, entries: Iterable[ManifestEntry], header: Sequence[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    lines += [f"{e.utt_id} {e.speaker_id} {e.file} {e.offset}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ArtifactIOError(f"cannot read manifest {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4 or not parts[3].isdigit():
            raise DataError(f"{path}:{lineno}: expected 'utt_id speaker_id file offset'")
        out.append(ManifestEntry(parts[0], parts[1], parts[2], int(parts[3])))
    return out


def load_manifest(path) -> list[Utterance]:
    """Read every utterance a manifest points at."""
    path = Path(path)
    blobs: dict[str, tuple[bytes, int]] = {}
    out = []
    for e in read_manifest(path):
        if e.file not in blobs:
            try:
                data = (path.parent / e.file).read_bytes()
            except OSError as exc:
                raise ArtifactIOError(f"cannot read features for {e.utt_id}: {exc}") from exc
            blobs[e.file] = (data, parse_header(data)[0])
        data, d_f = blobs[e.file]
        utt, _ = parse_record(data, e.offset, d_f)
        if (utt.utt_id, utt.speaker_id) != (e.utt_id, e.speaker_id):
            raise DataError(f"manifest entry {e.utt_id} points at record {utt.utt_id}")
        out.append(utt)
    return out


def write_split(directory, name: str, utterances: Sequence[Utterance], header: Sequence[str] = ()) -> Path:
    """Write ``<name>.gft`` plus ``<name>.lst`` and return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    feat = f"{name}.gft"
    offsets = write_features(directory / feat, utterances)
    manifest = directory / f"{name}.lst"
    write_manifest(manifest, [ManifestEntry(u.utt_id, u.speaker_id, feat, o) for u, o in zip(utterances, offsets)], header)
    return manifest


def write_subset_manifest(directory, name: str, full_name: str, subset: Sequence[Utterance], header: Sequence[str] = ()) -> Path:
    """Manifest over a subset of an already written split's feature file."""
    directory = Path(directory)
    entries = {e.utt_id: e for e in read_manifest(directory / f"{full_name}.lst")}
    manifest = directory / f"{name}.lst"
    write_manifest(manifest, [entries[u.utt_id] for u in subset], header)
    return manifest
