"""
F1 evaluation against reference summaries, the random-summary baseline, and
the inference runtime benchmark.

Two frames match when the euclidean distance of their unit-norm embeddings is
below the match threshold; matching is one-to-one, accepted greedily in
ascending distance order.
"""

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from src.databundle import EpisodeBundle, VideoTrack, normalize_bundle
from src.errors import ContractError, FormatError
from src.inference import greedy_actions, greedy_summarize

logger = logging.getLogger(__name__)

EMPTY_SUMMARY = "empty_summary"


@dataclass(frozen=True)
class EvalConfig:
    match_threshold: float = 0.6
    aggregate: str = "avg"

    def __post_init__(self):
        if not self.match_threshold > 0:
            raise ContractError(f"EvalConfig.match_threshold must be positive, got {self.match_threshold}")
        if self.aggregate not in ("avg", "max"):
            raise ContractError(f"EvalConfig.aggregate must be 'avg' or 'max', got {self.aggregate!r}")


@dataclass
class F1Result:
    precision: float
    recall: float
    f1: float
    per_reference: list = field(default_factory=list)
    flags: tuple = ()


# ----------------------------
# Matching and F1
# ----------------------------


def _rows(X):
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(0, 0) if X.size == 0 else np.atleast_2d(X)


def match_frames(S, G, threshold=0.6):
    """Greedy one-to-one matching; returns (s_idx, g_idx, distance) in acceptance order."""
    S, G = _rows(S), _rows(G)
    if G.shape[0] == 0:
        raise ContractError("match_frames: empty reference summary")
    if S.shape[0] == 0:
        return []
    distances = np.sqrt(np.maximum(((S[:, None, :] - G[None, :, :]) ** 2).sum(axis=2), 0.0))
    s_idx, g_idx = np.nonzero(distances < threshold)
    d = distances[s_idx, g_idx]
    order = np.lexsort((g_idx, s_idx, d))
    used_s, used_g, matches = set(), set(), []
    for k in order:
        s, g = int(s_idx[k]), int(g_idx[k])
        if s in used_s or g in used_g:
            continue
        used_s.add(s)
        used_g.add(g)
        matches.append((s, g, float(d[k])))
    return matches


def _single_f1(S, G, threshold):
    n_matched = len(match_frames(S, G, threshold))
    precision = n_matched / S.shape[0]
    recall = n_matched / G.shape[0]
    f1 = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1, "matches": n_matched}


def f1_score(S, references, cfg=EvalConfig()):
    """
    Precision, recall and F1 of summary embeddings S against one reference array or a list of them.

    Several references aggregate by mean (cfg.aggregate == "avg") or by the best-matching reference ("max").
    An empty summary scores 0 with the `empty_summary` flag.
    """
    if isinstance(references, np.ndarray) and references.ndim == 2:
        references = [references]
    references = [_rows(G) for G in references]
    if not references or any(G.shape[0] == 0 for G in references):
        raise ContractError("f1_score: every reference summary must be nonempty")
    S = _rows(S)
    if S.shape[0] == 0:
        logger.warning("f1_score: empty summary scored 0")
        zero = [{"precision": 0.0, "recall": 0.0, "f1": 0.0, "matches": 0} for _ in references]
        return F1Result(0.0, 0.0, 0.0, zero, (EMPTY_SUMMARY,))
    per_reference = [_single_f1(S, G, cfg.match_threshold) for G in references]
    if cfg.aggregate == "max":
        best = max(per_reference, key=lambda r: r["f1"])
        return F1Result(best["precision"], best["recall"], best["f1"], per_reference)
    return F1Result(
        float(np.mean([r["precision"] for r in per_reference])),
        float(np.mean([r["recall"] for r in per_reference])),
        float(np.mean([r["f1"] for r in per_reference])),
        per_reference,
    )


def _reference_frames(bundle):
    if not bundle.ground_truth:
        raise ContractError(f"event {bundle.event_id} has no ground-truth summary")
    return bundle.ground_truth_frames()


def summary_f1(bundle, actions, cfg=EvalConfig()):
    """F1 of (video_idx, frame_idx) actions against the bundle's ground truth, in normalized feature space."""
    bundle = normalize_bundle(bundle)
    X = bundle.all_frames
    S = X[[bundle.flat_index(v, f) for v, f in actions]] if actions else np.zeros((0, bundle.d_visual))
    return f1_score(S, _reference_frames(bundle), cfg)


def evaluate_summary(summary, bundle, cfg=EvalConfig()):
    """Evaluation report of a saved summary; refuses summaries produced for another event layout."""
    if summary.d_visual is not None and (summary.d_visual, summary.d_text) != (bundle.d_visual, bundle.d_text):
        raise FormatError(
            f"summary was produced for dims (visual {summary.d_visual}, text {summary.d_text}), "
            f"bundle has (visual {bundle.d_visual}, text {bundle.d_text})",
            None,
            "d_visual",
        )
    ids = {video.video_id: v for v, video in enumerate(bundle.videos)}
    actions = []
    for entry in summary.entries:
        v = ids.get(entry.video_id)
        if v is None or entry.frame_idx >= bundle.videos[v].n_frames:
            raise FormatError(f"summary entry {entry} does not exist in event {bundle.event_id}", None, "entries")
        actions.append((v, entry.frame_idx))
    if summary.event_id != bundle.event_id:
        logger.warning(f"Evaluating a summary of {summary.event_id} against event {bundle.event_id}")
    result = summary_f1(bundle, actions, cfg)
    return {
        "event_id": bundle.event_id,
        "per_reference_f1": [r["f1"] for r in result.per_reference],
        "mean_f1": result.f1,
        "precision": result.precision,
        "recall": result.recall,
        "threshold": cfg.match_threshold,
        "aggregate": cfg.aggregate,
        "flags": list(result.flags),
    }


def save_report(report, path):
    with open(path, "w", encoding="utf-8") as outfile:
        json.dump(report, outfile, indent=2, ensure_ascii=False)
    logger.info(f"Evaluation report saved to {path}")


# ----------------------------
# Baselines
# ----------------------------


@dataclass
class BaselineStats:
    mean: float
    std: float
    scores: list


def random_baseline(bundle, L, n_seeds, cfg=EvalConfig(), seed=0):
    """F1 statistics of uniformly random L-frame summaries (sampled without replacement)."""
    bundle = normalize_bundle(bundle)
    if L < 1 or L > bundle.total_frames:
        raise ContractError(f"random_baseline: L={L} must be in [1, {bundle.total_frames}]")
    if n_seeds < 1:
        raise ContractError(f"random_baseline: n_seeds must be positive, got {n_seeds}")
    X = bundle.all_frames
    G = _reference_frames(bundle)
    scores = []
    for i in range(n_seeds):
        rng = np.random.default_rng([seed, i])
        chosen = rng.choice(bundle.total_frames, size=L, replace=False)
        scores.append(f1_score(X[chosen], G, cfg).f1)
    return BaselineStats(float(np.mean(scores)), float(np.std(scores)), scores)


def best_of_lengths(bundle, params, policy_cfg, lengths, cfg=EvalConfig()):
    """Greedy F1 at each summary length; returns ({L: f1}, best L)."""
    per_length = {}
    for L in lengths:
        summary = greedy_summarize(bundle, params, policy_cfg, L)
        per_length[int(L)] = summary_f1(bundle, summary.actions, cfg).f1
    best = max(per_length, key=lambda L: (per_length[L], -L))
    logger.info(f"Best-of-lengths for {bundle.event_id}: L={best} with F1 {per_length[best]:.4f}")
    return per_length, best


# ----------------------------
# Runtime benchmark
# ----------------------------


@dataclass
class BenchReport:
    frame_counts: list
    seconds: list
    L: int
    slope: float
    intercept: float
    r2: float
    ratios: list  # time ratio between consecutive frame counts

    def to_dict(self):
        return {
            "L": self.L,
            "rows": [{"frames": n, "seconds": s} for n, s in zip(self.frame_counts, self.seconds)],
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "ratios": self.ratios,
        }


def bench_bundle(cfg, total_frames, n_videos=10, n_images=20, seed=0):
    """Random event of `total_frames` frames split as evenly as possible over `n_videos` videos."""
    rng = np.random.default_rng(seed)
    n_videos = min(n_videos, total_frames)
    counts = np.full(n_videos, total_frames // n_videos)
    counts[: total_frames % n_videos] += 1
    videos = [
        VideoTrack(f"v{v:03d}", rng.standard_normal((int(n), cfg.d_visual)), rng.standard_normal(cfg.d_text))
        for v, n in enumerate(counts)
    ]
    bundle = EpisodeBundle(
        f"bench_{total_frames}",
        cfg.d_visual,
        cfg.d_text,
        videos,
        rng.standard_normal((n_images, cfg.d_visual)),
        rng.standard_normal(cfg.d_text),
    )
    return normalize_bundle(bundle)


def linear_fit(x, y):
    """Least-squares y = slope * x + intercept and its R²."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if total == 0 else 1.0 - np.sum(residual**2) / total
    return float(slope), float(intercept), float(r2)


def bench_linear(params, cfg, frame_counts, L, n_videos=10, n_images=20, repeats=1, seed=0):
    """
    Wall-clock of greedy decoding per frame count, with a linear fit over the counts.

    Only the decode is timed: bundles are built and normalized beforehand and the
    summary is neither scored nor packaged.
    """
    frame_counts = sorted(int(n) for n in frame_counts)
    if len(frame_counts) < 4 or frame_counts[-1] < 4 * frame_counts[0]:
        raise ContractError(f"bench_linear needs at least 4 frame counts spanning 4x, got {frame_counts}")
    seconds = []
    for n in frame_counts:
        bundle = bench_bundle(cfg, n, n_videos, n_images, seed)
        if L > bundle.total_frames:
            raise ContractError(f"bench_linear: L={L} exceeds {n} frames")
        timings = []
        for _ in range(repeats):
            start = time.perf_counter()
            greedy_actions(bundle, params, cfg, L)
            timings.append(time.perf_counter() - start)
        seconds.append(float(min(timings)))
        logger.info(f"bench: {n} frames, L={L}: {seconds[-1]:.3f}s")
    slope, intercept, r2 = linear_fit(frame_counts, seconds)
    ratios = [b / a if a > 0 else float("inf") for a, b in zip(seconds, seconds[1:])]
    return BenchReport(frame_counts, seconds, L, slope, intercept, r2, ratios)
