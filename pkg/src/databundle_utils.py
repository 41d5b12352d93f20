import json
import logging
import os
from dataclasses import asdict

import numpy as np

from src.databundle import EpisodeBundle, SyntheticSpec, VideoTrack
from src.errors import BundleFormatError, QamvsError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
DATASET_FILE = "dataset.json"
_REQUIRED = ("format_version", "event_id", "d_visual", "d_text", "videos", "text_file", "images_file", "n_images")


def _write_f32(path, array):
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def _read_f32(directory, filename, count, field):
    path = os.path.join(directory, filename)
    if not os.path.isfile(path):
        raise BundleFormatError("missing payload file", path, field)
    size = os.path.getsize(path)
    if size != count * 4:
        raise BundleFormatError(
            f"payload holds {size // 4} floats but the manifest declares {count}", path, field
        )
    return np.fromfile(path, dtype="<f4").astype(np.float64)


def save_bundle(bundle, directory):
    """Write manifest.json plus raw little-endian float32 payloads."""
    os.makedirs(directory, exist_ok=True)
    videos = []
    for v, video in enumerate(bundle.videos):
        frames_file = f"frames_{v:03d}.f32"
        _write_f32(os.path.join(directory, frames_file), video.frames)
        videos.append({"video_id": video.video_id, "n_frames": video.n_frames, "frames_file": frames_file})
    _write_f32(os.path.join(directory, "text.f32"), bundle.text_matrix)
    _write_f32(os.path.join(directory, "images.f32"), bundle.images)
    manifest = {
        "format_version": FORMAT_VERSION,
        "event_id": bundle.event_id,
        "d_visual": bundle.d_visual,
        "d_text": bundle.d_text,
        "videos": videos,
        "text_file": "text.f32",
        "images_file": "images.f32",
        "n_images": bundle.n_images,
        "query": [float(x) for x in np.asarray(bundle.query, dtype=np.float32)],
        "ground_truth": [list(pair) for pair in bundle.ground_truth] if bundle.ground_truth is not None else None,
    }
    manifest_path = os.path.join(directory, MANIFEST)
    with open(manifest_path, "w", encoding="utf-8") as outfile:
        json.dump(manifest, outfile, indent=2, ensure_ascii=False)
    logger.info(f"Bundle {bundle.event_id} saved to {directory}")


def load_bundle(directory):
    manifest_path = os.path.join(directory, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise BundleFormatError("missing manifest", manifest_path, MANIFEST)
    try:
        with open(manifest_path, "r", encoding="utf-8") as infile:
            manifest = json.load(infile)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise BundleFormatError(f"malformed manifest: {e}", manifest_path, MANIFEST) from e
    if not isinstance(manifest, dict):
        raise BundleFormatError("manifest is not a JSON object", manifest_path, MANIFEST)
    for key in _REQUIRED:
        if key not in manifest:
            raise BundleFormatError("required field is missing", manifest_path, key)
    if manifest["format_version"] != FORMAT_VERSION:
        raise BundleFormatError(
            f"unsupported format version {manifest['format_version']}", manifest_path, "format_version"
        )

    try:
        d_visual = int(manifest["d_visual"])
        d_text = int(manifest["d_text"])
        videos_meta = manifest["videos"]
        n_images = int(manifest["n_images"])
        query = np.asarray(manifest.get("query"), dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise BundleFormatError(f"malformed manifest field: {e}", manifest_path, "manifest") from e
    if not isinstance(videos_meta, list) or not videos_meta:
        raise BundleFormatError("videos must be a non-empty list", manifest_path, "videos")

    text = _read_f32(directory, manifest["text_file"], len(videos_meta) * d_text, "text_file")
    text = text.reshape(len(videos_meta), d_text)
    videos = []
    for v, meta in enumerate(videos_meta):
        try:
            n_frames = int(meta["n_frames"])
            frames_file = meta["frames_file"]
            video_id = str(meta["video_id"])
        except (KeyError, TypeError, ValueError) as e:
            raise BundleFormatError(f"malformed video entry {v}: {e}", manifest_path, f"videos[{v}]") from e
        if n_frames <= 0:
            raise BundleFormatError(f"video entry {v} declares {n_frames} frames", manifest_path, f"videos[{v}]")
        frames = _read_f32(directory, frames_file, n_frames * d_visual, f"videos[{v}].frames_file")
        try:
            videos.append(VideoTrack(video_id, frames.reshape(n_frames, d_visual), text[v]))
        except QamvsError as e:
            raise BundleFormatError(f"malformed video entry {v}: {e}", manifest_path, f"videos[{v}]") from e
    images = _read_f32(directory, manifest["images_file"], n_images * d_visual, "images_file")

    truth = manifest.get("ground_truth")
    try:
        return EpisodeBundle(
            str(manifest["event_id"]),
            d_visual,
            d_text,
            videos,
            images.reshape(n_images, d_visual),
            query,
            tuple(tuple(pair) for pair in truth) if truth is not None else None,
        )
    except QamvsError as e:
        raise BundleFormatError(f"manifest is inconsistent with its payload: {e}", manifest_path, "manifest") from e


def save_dataset(bundles, directory, spec=None):
    os.makedirs(directory, exist_ok=True)
    for bundle in bundles:
        save_bundle(bundle, os.path.join(directory, bundle.event_id))
    header = {"format_version": FORMAT_VERSION, "events": [b.event_id for b in bundles]}
    if spec is not None:
        header["synthetic_spec"] = asdict(spec)
    with open(os.path.join(directory, DATASET_FILE), "w", encoding="utf-8") as outfile:
        json.dump(header, outfile, indent=2, ensure_ascii=False)
    logger.info(f"Dataset of {len(bundles)} events saved to {directory}")


def load_dataset(directory):
    """Load every event sub-directory (those holding a manifest) in sorted order."""
    if not os.path.isdir(directory):
        raise BundleFormatError("dataset directory does not exist", directory, None)
    names = sorted(
        name for name in os.listdir(directory) if os.path.isfile(os.path.join(directory, name, MANIFEST))
    )
    if not names:
        raise BundleFormatError("no event directories found", directory, MANIFEST)
    bundles = [load_bundle(os.path.join(directory, name)) for name in names]
    logger.info(f"Loaded {len(bundles)} events from {directory}")
    return bundles


def load_synthetic_spec(directory):
    path = os.path.join(directory, DATASET_FILE)
    if not os.path.isfile(path):
        return None
    with open(path, "r", encoding="utf-8") as infile:
        header = json.load(infile)
    raw = header.get("synthetic_spec")
    return SyntheticSpec(**raw) if raw else None
