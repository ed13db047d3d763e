"""File formats: trial lists, score files, embeddings, feature matrices, WAV.

Text formats are whitespace separated, one record per line; blank lines and
lines starting with ``#`` are skipped.

* trials:     ``label enroll_id test_id`` with label 0 or 1
* scores:     ``enroll_id test_id raw_score normalized_score``
* embeddings: ``utt_id f1 ... fD``
* utt2spk:    ``utt_id speaker_id``

Feature matrices are binary: ``b"PCFF"``, uint32 ndim, ndim uint32 dims,
then the values as little-endian float32 in C order.
"""
from __future__ import annotations

import math
import struct
import wave
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .scoring import TrialScoreSet

FEATURE_MAGIC = b"PCFF"


def _records(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield lineno, line.split()


def _float(tok, path, lineno, what):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"{what} {tok!r} is not a number", path, lineno) from None
    if not math.isfinite(v):
        raise ParseError(f"{what} {tok!r} is not finite", path, lineno)
    return v


def read_trials(path) -> list[tuple[int, str, str]]:
    out = []
    for lineno, toks in _records(path):
        if len(toks) != 3:
            raise ParseError(f"expected 'label enroll test', got {len(toks)} fields", path, lineno)
        if toks[0] not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {toks[0]!r}", path, lineno)
        out.append((int(toks[0]), toks[1], toks[2]))
    if not out:
        raise ParseError("no trials", path)
    return out


def write_trials(path, trials):
    with open(path, "w", encoding="utf-8") as fh:
        for label, e, t in trials:
            fh.write(f"{int(label)} {e} {t}\n")


def write_scores(path, scores: TrialScoreSet):
    norm = scores.scores
    with open(path, "w", encoding="utf-8") as fh:
        for e, t, r, n in zip(scores.enroll, scores.test, scores.raw, norm):
            fh.write(f"{e} {t} {r:.9g} {n:.9g}\n")


def read_scores(path) -> list[tuple[str, str, float, float]]:
    out = []
    for lineno, toks in _records(path):
        if len(toks) != 4:
            raise ParseError(f"expected 'enroll test raw normalized', got {len(toks)} fields",
                             path, lineno)
        out.append((toks[0], toks[1], _float(toks[2], path, lineno, "raw score"),
                    _float(toks[3], path, lineno, "normalized score")))
    if not out:
        raise ParseError("no scores", path)
    return out


def attach_labels(scores, trials, column: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Match score lines to trial labels by ``(enroll, test)``; returns
    ``(scores, labels)`` with ``column`` 2 = raw, 3 = normalized."""
    labels = {(e, t): lab for lab, e, t in trials}
    s, y = [], []
    for rec in scores:
        key = (rec[0], rec[1])
        if key not in labels:
            raise ContractError(f"score for {key[0]} {key[1]} has no trial label")
        s.append(rec[column])
        y.append(labels[key])
    return np.array(s), np.array(y)


def read_embeddings(path) -> dict[str, np.ndarray]:
    out, dim = {}, None
    for lineno, toks in _records(path):
        if len(toks) < 2:
            raise ParseError("expected an id followed by values", path, lineno)
        vec = np.array([_float(t, path, lineno, "value") for t in toks[1:]])
        if dim is None:
            dim = vec.size
        elif vec.size != dim:
            raise ParseError(f"expected {dim} values, got {vec.size}", path, lineno)
        if toks[0] in out:
            raise ParseError(f"duplicate id {toks[0]!r}", path, lineno)
        out[toks[0]] = vec
    return out


def write_embeddings(path, embeddings: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for utt, vec in embeddings.items():
            fh.write(utt + " " + " ".join(f"{v:.9g}" for v in np.ravel(vec)) + "\n")


def read_utt2spk(path) -> dict[str, str]:
    out = {}
    for lineno, toks in _records(path):
        if len(toks) != 2:
            raise ParseError(f"expected 'utt speaker', got {len(toks)} fields", path, lineno)
        out[toks[0]] = toks[1]
    return out


def write_utt2spk(path, mapping: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for utt, spk in mapping.items():
            fh.write(f"{utt} {spk}\n")


def write_features(path, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        fh.write(a.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ParseError("not a feature file (bad magic)", path)
    if len(data) < 8:
        raise ParseError("truncated header", path)
    (ndim,) = struct.unpack_from("<I", data, 4)
    head = 8 + 4 * ndim
    if len(data) < head:
        raise ParseError("truncated header", path)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    count = int(np.prod(shape)) if shape else 1
    if len(data) - head != 4 * count:
        raise ParseError(f"payload holds {(len(data) - head) // 4} values, header says {count}", path)
    return np.frombuffer(data, dtype="<f4", offset=head).reshape(shape).astype(np.float32)


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM mono WAV → ``(int16 samples, sample_rate)``."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise ContractError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
            if w.getsampwidth() != 2:
                raise ContractError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
            frames = w.readframes(w.getnframes())
            rate = w.getframerate()
    except (wave.Error, EOFError) as e:
        raise ParseError(f"unreadable WAV: {str(e) or 'truncated file'}", path) from None
    return np.frombuffer(frames, dtype="<i2").copy(), rate


def write_wav(path, samples, sample_rate: int = 16000):
    pcm = np.asarray(samples)
    if np.issubdtype(pcm.dtype, np.floating):
        pcm = np.clip(np.round(pcm * 32767), -32768, 32767)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.astype("<i2").tobytes())
