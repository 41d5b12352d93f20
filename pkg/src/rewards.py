"""
Terminal summary rewards, computed on unit-norm bundle embeddings of the selected frames.

  diversity           mean pairwise dissimilarity 1 - y.y' over ordered pairs
  representativeness  exp(-mean over all frames of the squared distance to the nearest summary frame)
  query adaptability  exp(-mean over summary frames of the squared distance to the nearest web-image)
  coherence           mean over summary frames of half the dot products with each temporal neighbour
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.errors import ContractError

logger = logging.getLogger(__name__)

DEGENERATE_SUMMARY = "degenerate_summary"
NO_QUERY_EVIDENCE = "no_query_evidence"


@dataclass(frozen=True)
class RewardWeights:
    beta: tuple = (1 / 3, 1 / 3, 1 / 3, 0.0)

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        if len(beta) != 4:
            raise ContractError(f"RewardWeights needs four betas, got {len(beta)}")
        if any(b < 0 for b in beta):
            raise ContractError(f"RewardWeights betas must be non-negative, got {beta}")
        if not any(b > 0 for b in beta):
            raise ContractError("RewardWeights needs at least one positive beta")
        object.__setattr__(self, "beta", beta)


PHASE1_WEIGHTS = RewardWeights((1 / 3, 1 / 3, 1 / 3, 0.0))
PHASE2_WEIGHTS = RewardWeights((0.25, 0.25, 0.25, 0.25))


@dataclass(frozen=True)
class RewardReport:
    r_div: float
    r_rep: float
    r_query: float
    r_coh: float
    composite: float
    flags: tuple = field(default_factory=tuple)

    def parts(self):
        return (self.r_div, self.r_rep, self.r_query, self.r_coh)

    def to_dict(self):
        return {
            "r_div": self.r_div,
            "r_rep": self.r_rep,
            "r_query": self.r_query,
            "r_coh": self.r_coh,
            "composite": self.composite,
            "flags": list(self.flags),
        }


def _as_rows(Y):
    Y = np.asarray(Y, dtype=np.float64)
    return Y.reshape(0, 0) if Y.size == 0 else np.atleast_2d(Y)


def _min_sq_distances(A, B):
    """For each row of A, the squared distance to its nearest row of B."""
    sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    return np.maximum(sq, 0.0).min(axis=1)


def r_div(Y):
    Y = _as_rows(Y)
    L = Y.shape[0]
    if L < 2:
        return 0.0
    gram = Y @ Y.T
    off_diagonal = gram.sum() - np.trace(gram)
    return float((L * (L - 1) - off_diagonal) / (L * (L - 1)))


def r_rep(Y, X):
    Y, X = _as_rows(Y), _as_rows(X)
    if Y.shape[0] == 0:
        raise ContractError("r_rep: empty summary")
    return float(np.exp(-_min_sq_distances(X, Y).mean()))


def r_query(Y, images):
    Y, images = _as_rows(Y), _as_rows(images)
    if images.shape[0] == 0:
        return 1.0
    if Y.shape[0] == 0:
        raise ContractError("r_query: empty summary")
    return float(np.exp(-_min_sq_distances(Y, images).mean()))


def r_coh(Y):
    Y = _as_rows(Y)
    L = Y.shape[0]
    if L == 0:
        raise ContractError("r_coh: empty summary")
    if L == 1:
        return 0.0
    neighbours = np.sum(Y[:-1] * Y[1:], axis=1)
    # each consecutive dot product is shared by both frames, each taking half
    return float(neighbours.sum() / L)


def composite(parts, weights):
    return float(np.dot(weights.beta, parts))


def reward_report(Y, X, images, weights):
    """All four rewards plus the weighted composite; degenerate inputs are flagged, not raised."""
    Y = _as_rows(Y)
    flags = []
    if Y.shape[0] < 2:
        flags.append(DEGENERATE_SUMMARY)
    if _as_rows(images).shape[0] == 0:
        flags.append(NO_QUERY_EVIDENCE)
    parts = (r_div(Y), r_rep(Y, X), r_query(Y, images), r_coh(Y))
    if flags:
        logger.debug(f"Reward diagnostics flagged: {flags}")
    return RewardReport(*parts, composite=composite(parts, weights), flags=tuple(flags))


def summary_rewards(bundle, actions, weights):
    """Rewards of an ordered list of (video_idx, frame_idx) actions on a normalized bundle."""
    flat = [bundle.flat_index(v, f) for v, f in actions]
    X = bundle.all_frames
    return reward_report(X[flat], X, bundle.images, weights)
