import json
import os

import numpy as np
import pytest

from src.cli import EXIT_DATA, dispatch
from src.databundle import EpisodeBundle, SyntheticSpec, VideoTrack, generate_synthetic
from src.databundle_utils import MANIFEST, load_bundle, load_dataset, load_synthetic_spec, save_bundle, save_dataset
from src.errors import BundleFormatError
from src.inference import greedy_summarize, save_summary
from src.policy import PolicyConfig, init_params

SPEC = SyntheticSpec(n_events=2, n_videos=3, frames_per_video=6, n_images=4, seed=11)


@pytest.fixture
def saved_bundle(tmp_path):
    bundle = generate_synthetic(SPEC)[0]
    directory = os.path.join(tmp_path, bundle.event_id)
    save_bundle(bundle, directory)
    return bundle, directory


def rewrite_manifest(directory, **changes):
    path = os.path.join(directory, MANIFEST)
    with open(path, "r", encoding="utf-8") as infile:
        manifest = json.load(infile)
    manifest.update(changes)
    with open(path, "w", encoding="utf-8") as outfile:
        json.dump(manifest, outfile)


def f32_grid(rng, shape):
    return rng.standard_normal(shape).astype(np.float32).astype(np.float64)


def random_bundle(rng, index):
    """A bundle of random shape whose payloads already sit on the float32 grid."""
    d_visual, d_text = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    counts = [int(n) for n in rng.integers(1, 7, size=int(rng.integers(1, 5)))]
    videos = [
        VideoTrack(f"v{v:03d}", f32_grid(rng, (n, d_visual)), f32_grid(rng, d_text)) for v, n in enumerate(counts)
    ]
    truth = None
    if rng.random() < 0.7:
        pairs = [(v, f) for v, n in enumerate(counts) for f in range(n)]
        picks = rng.choice(len(pairs), size=min(3, len(pairs)), replace=False)
        truth = tuple(pairs[int(i)] for i in picks)
    images = f32_grid(rng, (int(rng.integers(0, 4)), d_visual))
    return EpisodeBundle(f"event_{index:03d}", d_visual, d_text, videos, images, f32_grid(rng, d_text), truth)


# ----------------------------
# Round trip
# ----------------------------


def test_save_load_is_bitwise(saved_bundle):
    """A generated bundle survives the float32 format unchanged."""
    bundle, directory = saved_bundle
    loaded = load_bundle(directory)
    assert loaded.equals(bundle), "Generated bundles must survive the float32 format unchanged"
    assert loaded.ground_truth == bundle.ground_truth


def test_random_bundles_round_trip_bitwise(tmp_path):
    """Fifty bundles of random shape, with and without images or ground truth, load back bit for bit."""
    rng = np.random.default_rng(0)
    for trial in range(50):
        bundle = random_bundle(rng, trial)
        directory = os.path.join(tmp_path, bundle.event_id)
        save_bundle(bundle, directory)
        loaded = load_bundle(directory)
        assert loaded.equals(bundle), f"Trial {trial}: bundle changed on disk"
        assert loaded.ground_truth == bundle.ground_truth


def test_manifest_lists_payload_files(saved_bundle):
    """The manifest names one payload file per video, and each file exists."""
    bundle, directory = saved_bundle
    with open(os.path.join(directory, MANIFEST), "r", encoding="utf-8") as infile:
        manifest = json.load(infile)
    assert manifest["event_id"] == bundle.event_id
    assert [v["n_frames"] for v in manifest["videos"]] == [6, 6, 6]
    for video in manifest["videos"]:
        assert os.path.isfile(os.path.join(directory, video["frames_file"]))


def test_dataset_round_trip(tmp_path):
    """A saved dataset loads in event order and echoes its generator spec."""
    bundles = generate_synthetic(SPEC)
    save_dataset(bundles, str(tmp_path), SPEC)
    loaded = load_dataset(str(tmp_path))
    assert [b.event_id for b in loaded] == ["event_000", "event_001"]
    assert all(a.equals(b) for a, b in zip(bundles, loaded))
    assert os.path.isfile(os.path.join(tmp_path, "dataset.json"))
    assert load_synthetic_spec(str(tmp_path)) == SPEC


# ----------------------------
# Malformed inputs
# ----------------------------


def test_missing_manifest(tmp_path):
    """A directory without a manifest is refused at the manifest field."""
    with pytest.raises(BundleFormatError) as excinfo:
        load_bundle(str(tmp_path))
    assert excinfo.value.field == MANIFEST


def test_truncated_payload_names_file(saved_bundle):
    """A short frames file is reported with its path and its video entry."""
    _, directory = saved_bundle
    path = os.path.join(directory, "frames_001.f32")
    data = np.fromfile(path, dtype="<f4")
    data[:-3].tofile(path)
    with pytest.raises(BundleFormatError) as excinfo:
        load_bundle(directory)
    assert excinfo.value.path == path, f"Error should point at the short payload, got {excinfo.value.path}"
    assert excinfo.value.field == "videos[1].frames_file"


def test_video_without_frames_names_entry(saved_bundle):
    """A video declaring zero frames, with an empty payload to match, is a format error on its entry."""
    _, directory = saved_bundle
    with open(os.path.join(directory, MANIFEST), "r", encoding="utf-8") as infile:
        videos = json.load(infile)["videos"]
    videos[2]["n_frames"] = 0
    open(os.path.join(directory, videos[2]["frames_file"]), "wb").close()
    rewrite_manifest(directory, videos=videos)
    with pytest.raises(BundleFormatError) as excinfo:
        load_bundle(directory)
    assert excinfo.value.field == "videos[2]"


def test_video_without_frames_is_cli_data_error(saved_bundle, tmp_path):
    """Evaluating against a bundle with an empty video exits with the data error code."""
    bundle, directory = saved_bundle
    cfg = PolicyConfig(d_visual=bundle.d_visual, d_text=bundle.d_text)
    summary = os.path.join(tmp_path, "summary.json")
    save_summary(greedy_summarize(bundle, init_params(cfg), cfg, 2), summary)
    with open(os.path.join(directory, MANIFEST), "r", encoding="utf-8") as infile:
        videos = json.load(infile)["videos"]
    videos[0]["n_frames"] = 0
    rewrite_manifest(directory, videos=videos)
    assert dispatch(["eval", "--summary", summary, "--bundle", directory]) == EXIT_DATA


def test_unsupported_version(saved_bundle):
    """An unknown format version is refused at that field."""
    _, directory = saved_bundle
    rewrite_manifest(directory, format_version=99)
    with pytest.raises(BundleFormatError) as excinfo:
        load_bundle(directory)
    assert excinfo.value.field == "format_version"


def test_missing_field(saved_bundle):
    """A missing required field is named in the error."""
    _, directory = saved_bundle
    path = os.path.join(directory, MANIFEST)
    with open(path, "r", encoding="utf-8") as infile:
        manifest = json.load(infile)
    del manifest["d_text"]
    with open(path, "w", encoding="utf-8") as outfile:
        json.dump(manifest, outfile)
    with pytest.raises(BundleFormatError) as excinfo:
        load_bundle(directory)
    assert excinfo.value.field == "d_text"


def test_inconsistent_ground_truth(saved_bundle):
    """Ground truth pointing past a video's frames is a format error."""
    _, directory = saved_bundle
    rewrite_manifest(directory, ground_truth=[[0, 99]])
    with pytest.raises(BundleFormatError):
        load_bundle(directory)


def test_malformed_json(saved_bundle):
    """A manifest that is not JSON is a format error."""
    _, directory = saved_bundle
    with open(os.path.join(directory, MANIFEST), "w", encoding="utf-8") as outfile:
        outfile.write("{not json")
    with pytest.raises(BundleFormatError):
        load_bundle(directory)


def test_empty_dataset_directory(tmp_path):
    """A dataset directory with no events is a format error."""
    with pytest.raises(BundleFormatError):
        load_dataset(str(tmp_path))
