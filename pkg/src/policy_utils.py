import hashlib
import json
import logging
import struct
from dataclasses import asdict

import numpy as np

from src.databundle import EpisodeBundle, VideoTrack, normalize_bundle
from src.diffcore_utils import ParamStore, grad_check
from src.errors import ContractError, ModelFormatError
from src.policy import PolicyConfig, init_params, sequence_log_prob

logger = logging.getLogger(__name__)

MAGIC = b"QAMVS\x01"
FORMAT_VERSION = 1
_HEADER_LEN = struct.Struct("<I")


def model_bytes(params, cfg, extra=None):
    """Serialized model: magic, uint32 header length, UTF-8 JSON header, float32 payloads in name order."""
    header = {
        "format_version": FORMAT_VERSION,
        "config": asdict(cfg),
        "params": [{"name": name, "shape": list(p.shape)} for name, p in params.items()],
    }
    if extra:
        header.update(extra)
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in params.items())
    return MAGIC + _HEADER_LEN.pack(len(encoded)) + encoded + payload


def save_model(path, params, cfg, extra=None):
    blob = model_bytes(params, cfg, extra)
    with open(path, "wb") as outfile:
        outfile.write(blob)
    logger.info(f"Model saved to {path} ({len(params)} tensors, hash {hash_bytes(blob)})")
    return hash_bytes(blob)


def hash_bytes(blob):
    return hashlib.sha256(blob).hexdigest()[:16]


def model_hash(path):
    with open(path, "rb") as infile:
        return hash_bytes(infile.read())


def load_model(path):
    """Returns (params, cfg, header). Validates magic, header and total payload length."""
    try:
        with open(path, "rb") as infile:
            blob = infile.read()
    except FileNotFoundError as e:
        raise ModelFormatError("model file not found", path, None) from e
    if not blob.startswith(MAGIC):
        raise ModelFormatError("bad magic bytes", path, "magic")
    offset = len(MAGIC)
    if len(blob) < offset + _HEADER_LEN.size:
        raise ModelFormatError("truncated header length", path, "header")
    (header_len,) = _HEADER_LEN.unpack_from(blob, offset)
    offset += _HEADER_LEN.size
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"malformed header: {e}", path, "header") from e
    offset += header_len
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {header.get('format_version')}", path, "format_version")
    try:
        cfg = PolicyConfig(**header["config"])
        manifest = [(entry["name"], tuple(entry["shape"])) for entry in header["params"]]
    except (KeyError, TypeError, ContractError) as e:
        raise ModelFormatError(f"malformed header: {e}", path, "config") from e

    expected = sum(int(np.prod(shape)) for _, shape in manifest) * 4
    if len(blob) - offset != expected:
        raise ModelFormatError(
            f"payload has {len(blob) - offset} bytes, header declares {expected}", path, "params"
        )
    params = ParamStore()
    for name, shape in manifest:
        count = int(np.prod(shape))
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float64)
        params.add(name, values.reshape(shape))
        offset += count * 4
    reference = init_params(cfg)
    if reference.names() != params.names():
        raise ModelFormatError("parameter names do not match the policy layout", path, "params")
    for name, p in reference.items():
        if params[name].shape != p.shape:
            raise ModelFormatError(f"parameter {name} has shape {list(params[name].shape)}", path, "params")
    logger.info(f"Model loaded from {path} (hash {hash_bytes(blob)})")
    return params, cfg, header


def quantize_params(params):
    """Round every parameter onto the float32 grid the model file stores."""
    for _, p in params.items():
        p.data = p.data.astype(np.float32).astype(np.float64)


# ----------------------------
# Gradient-check harness
# ----------------------------


def toy_bundle(d_visual, d_text, seed=0, n_videos=2, frames_per_video=3, n_images=2):
    rng = np.random.default_rng(seed)
    videos = [
        VideoTrack(f"v{v:03d}", rng.standard_normal((frames_per_video, d_visual)), rng.standard_normal(d_text))
        for v in range(n_videos)
    ]
    bundle = EpisodeBundle(
        "toy",
        d_visual,
        d_text,
        videos,
        rng.standard_normal((n_images, d_visual)),
        rng.standard_normal(d_text),
        tuple(dict.fromkeys([(0, 0), (n_videos - 1, frames_per_video - 1)])),
    )
    return normalize_bundle(bundle)


def toy_config(dim):
    if dim < 2 or dim % 2:
        raise ContractError(f"gradient check needs an even dimension >= 2, got {dim}")
    return PolicyConfig(d_visual=dim, d_text=dim, d_e=dim, n_h=dim, a_dim=max(dim // 2, 1), mlp_hidden=dim)


def check_policy_gradients(dim=8, tol=1e-4, seed=0, h=1e-5):
    """Finite-difference check of d log pi(a_1, a_2) / d theta over every parameter of the policy."""
    cfg = toy_config(dim)
    params = init_params(cfg, seed=seed)
    bundle = toy_bundle(cfg.d_visual, cfg.d_text, seed=seed)
    actions = [(0, 1), (1, 2)]

    def objective(store):
        return sequence_log_prob(bundle, store, cfg, actions)

    return grad_check(objective, params, h=h, tol=tol)
