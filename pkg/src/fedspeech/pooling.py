"""Statistics pooling: collapse a variable-length embedding sequence into a
fixed-width vector of six per-dimension statistics.

Layout is statistic-major and fixed: [mean | std | skewness | kurtosis | min |
max], each block as wide as the embedding. Moments are population (biased)
moments; kurtosis is Fisher excess kurtosis. Dimensions with (near) zero
variance report 0 skewness and 0 kurtosis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError

STATISTIC_NAMES = ("mean", "std", "skewness", "kurtosis", "min", "max")
N_STATISTICS = len(STATISTIC_NAMES)

ZERO_VARIANCE_THRESHOLD = 1e-12


@dataclass
class EmbeddingSequence:
    """One recording's T x D matrix of embedding frames."""

    frames: np.ndarray
    recording_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(f"embedding sequence {self.recording_id!r} must be a "
                            f"non-empty T x D matrix, got shape {self.frames.shape}")


@dataclass
class FeatureVector:
    """Pooled static representation of one recording, with identity and label."""

    values: np.ndarray
    label: int
    subject_id: str
    site_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 (HC) or 1 (PD), got {self.label!r}")


def pooled_width(embedding_dim: int) -> int:
    return N_STATISTICS * embedding_dim


def pool_statistics(seq: EmbeddingSequence) -> np.ndarray:
    """Six statistics per embedding dimension over the frames of one recording.

    For a single frame the std, skewness and kurtosis are 0 and min = max =
    mean. Raises DataError on non-finite frames.
    """
    frames = seq.frames
    if not np.all(np.isfinite(frames)):
        raise DataError(f"non-finite value in embedding sequence {seq.recording_id!r}")
    mean = frames.mean(axis=0)
    delta = frames - mean
    m2 = np.mean(delta ** 2, axis=0)
    m3 = np.mean(delta ** 3, axis=0)
    m4 = np.mean(delta ** 4, axis=0)
    std = np.sqrt(m2)
    ok = m2 >= ZERO_VARIANCE_THRESHOLD
    skew = np.zeros_like(m2)
    kurt = np.zeros_like(m2)
    np.divide(m3, m2 ** 1.5, out=skew, where=ok)
    np.divide(m4, m2 ** 2, out=kurt, where=ok)
    kurt[ok] -= 3.0
    return np.concatenate([mean, std, skew, kurt, frames.min(axis=0), frames.max(axis=0)])


def pool_corpus(sequences: Sequence[EmbeddingSequence], labels: Sequence[int],
                subject_ids: Sequence[str], site_id: str) -> list[FeatureVector]:
    """Pool every recording of one site, preserving order."""
    if not (len(sequences) == len(labels) == len(subject_ids)):
        raise DataError("sequences, labels and subject_ids must have equal lengths")
    out = []
    for seq, label, subject in zip(sequences, labels, subject_ids):
        try:
            values = pool_statistics(seq)
        except DataError as exc:
            raise DataError(f"recording {seq.recording_id!r}: {exc}") from exc
        out.append(FeatureVector(values=values, label=int(label),
                                 subject_id=str(subject), site_id=site_id))
    return out


def stack_features(vectors: Sequence[FeatureVector]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Stack FeatureVectors into (X, y, subject_ids) arrays for training."""
    if not vectors:
        raise DataError("cannot stack an empty feature set")
    x = np.ascontiguousarray(np.stack([fv.values for fv in vectors]))
    y = np.array([fv.label for fv in vectors], dtype=np.int64)
    subjects = [fv.subject_id for fv in vectors]
    return x, y, subjects
