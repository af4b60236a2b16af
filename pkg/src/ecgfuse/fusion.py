"""Multi-lead fusion at data, feature, and decision level.

Data fusion tiles the 12 normalized per-lead spectrograms into one 3x4 grid
(the clinical display layout). Feature fusion merges per-lead embeddings by
concatenation (length 12*tau) or elementwise mean (length tau). Decision
fusion merges per-lead class-probability vectors by averaging or by majority
vote over per-lead argmax labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram
from .ingest import LeadId, LEAD_ORDER

__all__ = [
    "FUSION_STRATEGIES",
    "LEAD_GRID",
    "StackedSpectrogram",
    "FeatureVector",
    "LeadFeatureBundle",
    "LeadPredictionBundle",
    "FusionError",
    "MissingLead",
    "ShapeMismatch",
    "TauMismatch",
    "NotNormalized",
    "data_fuse",
    "extract_tile",
    "split_stacked",
    "feature_concat",
    "feature_accumulate",
    "decision_accumulate",
    "majority_vote",
    "concat_lead_features",
    "accumulate_lead_features",
]

FUSION_STRATEGIES = ("data", "feature_concat", "feature_accum", "decision_accum", "decision_vote")

# 3 rows x 4 columns, mirroring how a cardiologist lays out the 12 leads.
LEAD_GRID: tuple[tuple[LeadId, ...], ...] = (
    (LeadId.I, LeadId.aVR, LeadId.V1, LeadId.V4),
    (LeadId.II, LeadId.aVL, LeadId.V2, LeadId.V5),
    (LeadId.III, LeadId.aVF, LeadId.V3, LeadId.V6),
)


class FusionError(Exception):
    pass


class MissingLead(FusionError):
    pass


class ShapeMismatch(FusionError):
    pass


class TauMismatch(FusionError):
    pass


class NotNormalized(FusionError):
    pass


@dataclass
class StackedSpectrogram:
    """12 per-lead spectrogram tiles assembled into one array."""

    values: np.ndarray
    window_index: int
    tile_shape: tuple[int, int]
    bin_hz: float = 0.0
    frame_s: float = 0.0
    normalized: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class FeatureVector:
    """A tau-dimensional embedding of one (possibly stacked) spectrogram."""

    values: np.ndarray
    backend_id: str
    source: tuple = ()

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class LeadFeatureBundle:
    """Per-lead feature vectors for one window index."""

    n: int
    vectors: dict[LeadId, FeatureVector]


@dataclass
class LeadPredictionBundle:
    """Per-lead class-probability vectors for one window or sequence."""

    n: int
    predictions: dict[LeadId, np.ndarray]


def _check_leads(mapping: dict) -> None:
    missing = [lead.value for lead in LEAD_ORDER if lead not in mapping]
    if missing:
        raise MissingLead(f"missing leads: {missing}")


def data_fuse(specs: dict[LeadId, Spectrogram], n: int = 0) -> StackedSpectrogram:
    """Tile 12 normalized spectrograms into the 3x4 clinical grid."""
    _check_leads(specs)
    shapes = {specs[lead].values.shape for lead in LEAD_ORDER}
    if len(shapes) != 1:
        raise ShapeMismatch(f"tile shapes differ: {sorted(shapes)}")
    for lead in LEAD_ORDER:
        if not specs[lead].normalized:
            raise NotNormalized(f"lead {lead.value} spectrogram is not normalized")
    grid = np.block([[specs[lead].values for lead in row] for row in LEAD_GRID])
    tile = next(iter(shapes))
    ref = specs[LeadId.I]
    return StackedSpectrogram(
        values=grid,
        window_index=n,
        tile_shape=tile,
        bin_hz=ref.bin_hz,
        frame_s=ref.frame_s,
    )


def extract_tile(stacked: StackedSpectrogram, row: int, col: int) -> np.ndarray:
    h, w = stacked.tile_shape
    return stacked.values[row * h : (row + 1) * h, col * w : (col + 1) * w]


def split_stacked(stacked: StackedSpectrogram) -> dict[LeadId, np.ndarray]:
    """Recover the 12 per-lead tiles; inverse of data_fuse on the values."""
    out: dict[LeadId, np.ndarray] = {}
    for r, row in enumerate(LEAD_GRID):
        for c, lead in enumerate(row):
            out[lead] = extract_tile(stacked, r, c)
    return out


def _bundle_matrix(bundle: LeadFeatureBundle) -> tuple[np.ndarray, str]:
    _check_leads(bundle.vectors)
    taus = {len(bundle.vectors[lead].values) for lead in LEAD_ORDER}
    if len(taus) != 1:
        raise TauMismatch(f"feature lengths differ across leads: {sorted(taus)}")
    backends = {bundle.vectors[lead].backend_id for lead in LEAD_ORDER}
    if len(backends) != 1:
        raise TauMismatch(f"mixed backends in one bundle: {sorted(backends)}")
    mat = np.stack([np.asarray(bundle.vectors[lead].values, dtype=np.float64) for lead in LEAD_ORDER])
    return mat, next(iter(backends))


def concat_lead_features(mat: np.ndarray) -> np.ndarray:
    """Concatenate rows (leads, canonical order) of a (12, tau) matrix."""
    return np.ascontiguousarray(mat).reshape(-1)


def accumulate_lead_features(mat: np.ndarray) -> np.ndarray:
    """Elementwise mean over the lead axis of a (12, tau) matrix."""
    return mat.sum(axis=0) / mat.shape[0]


def feature_concat(bundle: LeadFeatureBundle) -> FeatureVector:
    """Stack the 12 per-lead vectors into one of length 12*tau."""
    mat, backend = _bundle_matrix(bundle)
    return FeatureVector(
        values=concat_lead_features(mat), backend_id=backend, source=("fused", bundle.n)
    )


def feature_accumulate(bundle: LeadFeatureBundle) -> FeatureVector:
    """Elementwise mean of the 12 per-lead vectors; length stays tau."""
    mat, backend = _bundle_matrix(bundle)
    return FeatureVector(
        values=accumulate_lead_features(mat), backend_id=backend, source=("fused", bundle.n)
    )


def _prediction_matrix(bundle: LeadPredictionBundle, check_normalized: bool) -> np.ndarray:
    _check_leads(bundle.predictions)
    mat = np.stack(
        [np.asarray(bundle.predictions[lead], dtype=np.float64) for lead in LEAD_ORDER]
    )
    if mat.ndim != 2:
        raise ShapeMismatch("per-lead predictions must be 1-D probability vectors")
    if check_normalized and not np.allclose(mat.sum(axis=1), 1.0, atol=1e-6):
        raise NotNormalized("per-lead predictions must each sum to 1")
    return mat


def decision_accumulate(bundle: LeadPredictionBundle) -> np.ndarray:
    """Average the 12 per-lead probability vectors; stays on the simplex."""
    mat = _prediction_matrix(bundle, check_normalized=True)
    return mat.sum(axis=0) / mat.shape[0]


def majority_vote(bundle: LeadPredictionBundle) -> int:
    """Most frequent per-lead argmax class.

    Ties go to the tied class with the higher mean probability across all
    leads, then to the lowest class index.
    """
    mat = _prediction_matrix(bundle, check_normalized=False)
    votes = np.argmax(mat, axis=1)
    counts = np.bincount(votes, minlength=mat.shape[1])
    top = counts.max()
    tied = np.flatnonzero(counts == top)
    if len(tied) == 1:
        return int(tied[0])
    means = mat.mean(axis=0)[tied]
    return int(tied[np.argmax(means)])  # argmax takes the lowest index on equal means
