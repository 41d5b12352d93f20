"""
Query events: videos of frame embeddings, web-image embeddings, per-video text
embeddings, a query embedding and an optional ordered ground-truth summary.

Also holds the seeded synthetic generator that mimics the shape of real query
events at desk scale.
"""

import logging
from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from src.errors import ContractError, DegenerateInputError, DimensionError

logger = logging.getLogger(__name__)


def _frozen_array(value, ndim, label):
    array = np.array(value, dtype=np.float64)
    if array.ndim != ndim:
        raise DimensionError(f"{label}: expected {ndim}-D array, got shape {list(array.shape)}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class VideoTrack:
    video_id: str
    frames: np.ndarray  # [n_frames x d_visual], temporal order
    text: np.ndarray  # [d_text], title/description embedding

    def __post_init__(self):
        object.__setattr__(self, "frames", _frozen_array(self.frames, 2, f"video {self.video_id} frames"))
        object.__setattr__(self, "text", _frozen_array(self.text, 1, f"video {self.video_id} text"))
        if self.frames.shape[0] == 0:
            raise ContractError(f"video {self.video_id} has no frames")

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class EpisodeBundle:
    event_id: str
    d_visual: int
    d_text: int
    videos: tuple
    images: np.ndarray  # [n_images x d_visual], may have zero rows
    query: np.ndarray  # [d_text]
    ground_truth: tuple = None  # ordered (video_idx, frame_idx) pairs

    def __post_init__(self):
        object.__setattr__(self, "videos", tuple(self.videos))
        images = np.array(self.images, dtype=np.float64)
        if images.size == 0:
            images = np.zeros((0, self.d_visual))
        if images.ndim != 2 or images.shape[1] != self.d_visual:
            raise DimensionError(f"images have shape {list(images.shape)}, expected [n x {self.d_visual}]")
        object.__setattr__(self, "images", _frozen_array(images, 2, "images"))
        object.__setattr__(self, "query", _frozen_array(self.query, 1, "query"))
        if not self.videos:
            raise ContractError(f"event {self.event_id} has no videos")
        for v, video in enumerate(self.videos):
            if video.frames.shape[1] != self.d_visual:
                raise DimensionError(
                    f"video {v} frames have dimension {video.frames.shape[1]}, expected d_visual={self.d_visual}"
                )
            if video.text.shape[0] != self.d_text:
                raise DimensionError(f"video {v} text has dimension {video.text.shape[0]}, expected {self.d_text}")
        if self.query.shape[0] != self.d_text:
            raise DimensionError(f"query has dimension {self.query.shape[0]}, expected d_text={self.d_text}")
        if self.ground_truth is not None:
            truth = tuple((int(v), int(f)) for v, f in self.ground_truth)
            for v, f in truth:
                if not (0 <= v < len(self.videos) and 0 <= f < self.videos[v].n_frames):
                    raise ContractError(f"ground truth entry ({v}, {f}) is out of range")
            if len(set(truth)) != len(truth):
                raise ContractError("ground truth contains duplicate frames")
            object.__setattr__(self, "ground_truth", truth)

    @property
    def n_videos(self):
        return len(self.videos)

    @property
    def n_images(self):
        return self.images.shape[0]

    @cached_property
    def frame_counts(self):
        return np.array([video.n_frames for video in self.videos], dtype=np.int64)

    @cached_property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.frame_counts)[:-1]]).astype(np.int64)

    @property
    def total_frames(self):
        return int(self.frame_counts.sum())

    @cached_property
    def all_frames(self):
        """Every frame embedding, videos concatenated in order: [total_frames x d_visual]."""
        return np.vstack([video.frames for video in self.videos])

    @cached_property
    def text_matrix(self):
        return np.stack([video.text for video in self.videos])

    def flat_index(self, video_idx, frame_idx):
        return int(self.offsets[video_idx] + frame_idx)

    def unflat_index(self, index):
        video_idx = int(np.searchsorted(self.offsets, index, side="right") - 1)
        return video_idx, int(index - self.offsets[video_idx])

    def ground_truth_frames(self):
        if not self.ground_truth:
            return np.zeros((0, self.d_visual))
        return np.stack([self.videos[v].frames[f] for v, f in self.ground_truth])

    def equals(self, other):
        """Bitwise equality on every numeric payload plus metadata."""
        if not isinstance(other, EpisodeBundle):
            return False
        if (self.event_id, self.d_visual, self.d_text, self.n_videos, self.ground_truth) != (
            other.event_id,
            other.d_visual,
            other.d_text,
            other.n_videos,
            other.ground_truth,
        ):
            return False
        if not (np.array_equal(self.images, other.images) and np.array_equal(self.query, other.query)):
            return False
        return all(
            a.video_id == b.video_id and np.array_equal(a.frames, b.frames) and np.array_equal(a.text, b.text)
            for a, b in zip(self.videos, other.videos)
        )


@dataclass(frozen=True)
class SyntheticSpec:
    n_events: int = 8
    n_videos: int = 6
    frames_per_video: int = 20
    n_images: int = 12
    d_visual: int = 16
    d_text: int = 8
    n_concepts: int = 5
    relevance_fraction: float = 0.8
    noise_scale: float = 0.5
    seed: int = 42

    def __post_init__(self):
        counts = asdict(self)
        for name in ("n_events", "n_videos", "frames_per_video", "n_images", "d_visual", "d_text", "n_concepts"):
            if counts[name] <= 0:
                raise ContractError(f"SyntheticSpec.{name} must be positive, got {counts[name]}")
        if not 0.0 < self.relevance_fraction <= 1.0:
            raise ContractError(f"SyntheticSpec.relevance_fraction must be in (0, 1], got {self.relevance_fraction}")
        if self.noise_scale < 0:
            raise ContractError(f"SyntheticSpec.noise_scale must be non-negative, got {self.noise_scale}")

    @property
    def n_relevant(self):
        return max(1, int(round(self.relevance_fraction * self.n_concepts)))


# ----------------------------
# Normalization
# ----------------------------


def _unit_rows(matrix, label="row"):
    norms = np.linalg.norm(matrix, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateInputError(f"zero-norm embedding at {label} {int(zero[0])}")
    return matrix / norms[:, None]


def _unit(vector, label="vector"):
    return _unit_rows(np.asarray(vector, dtype=np.float64)[None, :], label)[0]


def normalize_bundle(bundle):
    """Scale every visual and text embedding (query included) to unit l2 norm."""
    videos = []
    for v, video in enumerate(bundle.videos):
        frames = _unit_rows(video.frames, f"video {v} frame")
        text = _unit(video.text, f"video {v} text")
        videos.append(VideoTrack(video.video_id, frames, text))
    images = _unit_rows(bundle.images, "image") if bundle.n_images else bundle.images
    query = _unit(bundle.query, "query")
    return EpisodeBundle(bundle.event_id, bundle.d_visual, bundle.d_text, videos, images, query, bundle.ground_truth)


def select_videos(bundle, indices):
    """Sub-event over the chosen videos; ground truth keeps only frames of kept videos."""
    indices = [int(i) for i in indices]
    if not indices or len(set(indices)) != len(indices):
        raise ContractError(f"select_videos: need distinct video indices, got {indices}")
    remap = {old: new for new, old in enumerate(indices)}
    truth = None
    if bundle.ground_truth is not None:
        truth = tuple((remap[v], f) for v, f in bundle.ground_truth if v in remap)
    return EpisodeBundle(
        bundle.event_id,
        bundle.d_visual,
        bundle.d_text,
        [bundle.videos[i] for i in indices],
        bundle.images,
        bundle.query,
        truth,
    )


# ----------------------------
# Synthetic events
# ----------------------------


def _quantize(array):
    # on-disk payloads are float32; keep generated values on that grid so save/load is lossless
    return np.asarray(array, dtype=np.float32).astype(np.float64)


def _smooth_noise(rng, n_frames, dim, scale, rho=0.8):
    """AR(1) Gaussian noise whose per-frame vectors have expected norm close to `scale`."""
    if scale == 0:
        return np.zeros((n_frames, dim))
    eps = rng.standard_normal((n_frames, dim)) * (scale / np.sqrt(dim))
    noise = np.empty_like(eps)
    noise[0] = eps[0]
    innovation = np.sqrt(1.0 - rho * rho)
    for t in range(1, n_frames):
        noise[t] = rho * noise[t - 1] + innovation * eps[t]
    return noise


def _walk_labels(rng, n_concepts, n_frames):
    n_visit = int(min(rng.integers(2, 5), n_concepts, n_frames))
    walk = rng.choice(n_concepts, size=n_visit, replace=False)
    if n_visit > 1:
        cuts = np.sort(rng.choice(np.arange(1, n_frames), size=n_visit - 1, replace=False))
    else:
        cuts = np.array([], dtype=np.int64)
    lengths = np.diff(np.concatenate([[0], cuts, [n_frames]]))
    return np.repeat(walk, lengths)


def _generate_event(spec, rng, index):
    centers = _quantize(_unit_rows(rng.standard_normal((spec.n_concepts, spec.d_visual)), "concept"))
    relevant = np.arange(spec.n_relevant)
    query = _quantize(_unit(rng.standard_normal(spec.d_text)))

    videos = []
    labels_all = []
    for v in range(spec.n_videos):
        labels = _walk_labels(rng, spec.n_concepts, spec.frames_per_video)
        noise = _smooth_noise(rng, spec.frames_per_video, spec.d_visual, spec.noise_scale)
        frames = _quantize(_unit_rows(centers[labels] + noise, f"video {v} frame"))
        share = float(np.isin(labels, relevant).mean())
        perturbation = (1.0 - share) * 2.0 * _unit(rng.standard_normal(spec.d_text))
        text = _quantize(_unit(query + perturbation))
        videos.append(VideoTrack(f"v{v:03d}", frames, text))
        labels_all.append(labels)

    image_concepts = relevant[np.arange(spec.n_images) % relevant.size]
    image_noise = rng.standard_normal((spec.n_images, spec.d_visual)) * (spec.noise_scale / np.sqrt(spec.d_visual))
    images = _quantize(_unit_rows(centers[image_concepts] + image_noise, "image"))

    all_frames = np.vstack([video.frames for video in videos])
    labels_flat = np.concatenate(labels_all)
    offsets = np.concatenate([[0], np.cumsum([spec.frames_per_video] * spec.n_videos)[:-1]])
    truth = []
    used = set()
    for concept in relevant:
        if not np.any(labels_flat == concept):
            logger.debug(f"event {index}: concept {concept} is never visited, no ground-truth frame")
            continue
        distances = np.sum((all_frames - centers[concept]) ** 2, axis=1)
        for flat in np.argsort(distances, kind="stable"):
            if int(flat) not in used:
                used.add(int(flat))
                v = int(np.searchsorted(offsets, flat, side="right") - 1)
                truth.append((v, int(flat - offsets[v])))
                break

    bundle = EpisodeBundle(f"event_{index:03d}", spec.d_visual, spec.d_text, videos, images, query, tuple(truth))
    return bundle, centers


def generate_synthetic(spec, return_centers=False):
    """Seeded synthetic query events; identical specs give bit-identical bundles."""
    rng = np.random.default_rng(spec.seed)
    events = [_generate_event(spec, rng, index) for index in range(spec.n_events)]
    logger.info(
        f"Generated {spec.n_events} synthetic events: {spec.n_videos} videos x {spec.frames_per_video} frames, "
        f"{spec.n_images} images, {spec.n_relevant}/{spec.n_concepts} relevant concepts"
    )
    if return_centers:
        return [bundle for bundle, _ in events], [centers for _, centers in events]
    return [bundle for bundle, _ in events]
