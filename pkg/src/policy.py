"""
Hierarchical-attention pointer-network policy.

At every decoding step the next frame is drawn from a convex mixture of three
distributions over the unselected frames:

  1. a two-level frame/video attention (video first, then frame within it),
  2. a web-image head scoring frames against an image-attention context,
  3. a text head spreading each video's query-similarity mass over its
     remaining frames.

The mixture weights come from one more attention over the three context
vectors. Every distribution here is exactly zero on already selected frames.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from src.diffcore import (
    LSTMWeights,
    Tensor,
    concat,
    log,
    lstm_step,
    masked_softmax,
    matmul,
    stack,
    tanh,
    transpose,
    zeros,
)
from src.diffcore_utils import ParamStore, init_uniform
from src.errors import ContractError, DimensionError, EmptySupportError, EpisodeCompleteError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolicyConfig:
    d_visual: int = 16
    d_text: int = 8
    d_e: int = 16
    n_h: int = 16
    a_dim: int = 8
    bilstm_h: int = None
    mlp_hidden: int = 16
    use_image_head: bool = True
    use_query_head: bool = True

    def __post_init__(self):
        if self.bilstm_h is None:
            object.__setattr__(self, "bilstm_h", self.d_e // 2)
        for name in ("d_visual", "d_text", "d_e", "n_h", "a_dim", "bilstm_h", "mlp_hidden"):
            if getattr(self, name) <= 0:
                raise ContractError(f"PolicyConfig.{name} must be positive, got {getattr(self, name)}")
        if 2 * self.bilstm_h != self.d_e:
            raise ContractError(f"PolicyConfig needs 2 * bilstm_h == d_e, got bilstm_h={self.bilstm_h}, d_e={self.d_e}")

    @classmethod
    def full_scale(cls, d_visual, d_text):
        return cls(d_visual=d_visual, d_text=d_text, d_e=256, n_h=256, a_dim=32, mlp_hidden=256)


def init_params(cfg, seed=0):
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization of every parameter."""
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def add(name, shape, fan_in):
        store.add(name, init_uniform(shape, fan_in, rng))

    add("proj.W", (cfg.d_e, cfg.d_visual), cfg.d_visual)
    add("proj.b", (cfg.d_e,), cfg.d_visual)
    for prefix in ("enc_fw", "enc_bw"):
        add(f"{prefix}.W", (4 * cfg.bilstm_h, cfg.d_e), cfg.d_e)
        add(f"{prefix}.U", (4 * cfg.bilstm_h, cfg.bilstm_h), cfg.bilstm_h)
        add(f"{prefix}.b", (4 * cfg.bilstm_h,), cfg.bilstm_h)
    add("dec.W", (4 * cfg.n_h, cfg.d_e), cfg.d_e)
    add("dec.U", (4 * cfg.n_h, cfg.n_h), cfg.n_h)
    add("dec.b", (4 * cfg.n_h,), cfg.n_h)
    add("dec.start", (cfg.d_e,), cfg.d_e)
    for prefix, m in (("att_frame", cfg.d_e), ("att_video", cfg.d_e), ("att_image", cfg.d_e), ("att_mix", cfg.d_e)):
        add(f"{prefix}.w1", (cfg.a_dim,), cfg.a_dim)
        add(f"{prefix}.W2", (cfg.a_dim, m + cfg.n_h), m + cfg.n_h)
    add("att_query.w1", (cfg.a_dim,), cfg.a_dim)
    add("att_query.W2", (cfg.a_dim, cfg.d_text + cfg.n_h), cfg.d_text + cfg.n_h)
    add("adapter.W1", (cfg.mlp_hidden, cfg.d_text), cfg.d_text)
    add("adapter.b1", (cfg.mlp_hidden,), cfg.d_text)
    add("adapter.W2", (cfg.d_e, cfg.mlp_hidden), cfg.mlp_hidden)
    add("adapter.b2", (cfg.d_e,), cfg.mlp_hidden)
    logger.debug(f"Initialized {len(store)} parameter tensors ({store.num_values()} values) with seed {seed}")
    return store


def _lstm_weights(params, prefix):
    return LSTMWeights(params[f"{prefix}.W"], params[f"{prefix}.U"], params[f"{prefix}.b"])


def _attention_params(params, prefix):
    return params[f"{prefix}.w1"], params[f"{prefix}.W2"]


# ----------------------------
# Attention operator
# ----------------------------


def attention_op(U, h, w1, W2, mask=None):
    """
    Pointer attention over the rows of U.

    e_i = w1 . tanh(W2 [u_i ; h]), p = softmax(e) over `mask`, c = sum_i p_i u_i.
    Returns (p, c).
    """
    if isinstance(U, (list, tuple)):
        if not U:
            raise EmptySupportError("attention_op: empty input set")
        U = stack(list(U))
    if U.data.ndim != 2 or U.shape[0] == 0:
        raise EmptySupportError(f"attention_op: empty input set, shape {list(U.shape)}")
    m = U.shape[1]
    if W2.shape != (w1.shape[0], m + h.shape[0]):
        raise DimensionError(
            f"attention_op: W2 {list(W2.shape)} does not fit inputs of size {m}, "
            f"state {h.shape[0]}, w1 {list(w1.shape)}"
        )
    W2_u = W2[:, :m]
    W2_h = W2[:, m:]
    pre = matmul(U, transpose(W2_u)) + matmul(W2_h, h)
    logits = matmul(tanh(pre), w1)
    p = masked_softmax(logits, np.ones(U.shape[0], dtype=bool) if mask is None else mask)
    return p, matmul(p, U)


# ----------------------------
# Encoders
# ----------------------------


@dataclass
class Encodings:
    frames: list  # per video, Tensor[n_frames x d_e]
    all_frames: Tensor  # [total_frames x d_e], videos in order
    images: Tensor = None  # [n_images x d_e] or None when the event has no images


def _run_recurrence(rows, weights, hidden):
    h = zeros(hidden)
    c = zeros(hidden)
    outputs = []
    for x in rows:
        h, c = lstm_step(x, h, c, weights)
        outputs.append(h)
    return outputs


def encode_frames(bundle, params, cfg):
    """Project frames and images into d_e; contextualize each video's frames with a bidirectional recurrence."""
    if bundle.d_visual != cfg.d_visual or bundle.d_text != cfg.d_text:
        raise DimensionError(
            f"bundle dims (visual {bundle.d_visual}, text {bundle.d_text}) do not match "
            f"policy config (visual {cfg.d_visual}, text {cfg.d_text})"
        )
    W_t = transpose(params["proj.W"])
    b = params["proj.b"]
    fw = _lstm_weights(params, "enc_fw")
    bw = _lstm_weights(params, "enc_bw")
    per_video = []
    all_rows = []
    for video in bundle.videos:
        projected = matmul(Tensor(video.frames), W_t) + b
        rows = [projected[t] for t in range(video.n_frames)]
        forward = _run_recurrence(rows, fw, cfg.bilstm_h)
        backward_ = _run_recurrence(rows[::-1], bw, cfg.bilstm_h)[::-1]
        encoded = [concat([f, r]) for f, r in zip(forward, backward_)]
        per_video.append(stack(encoded))
        all_rows.extend(encoded)
    images = matmul(Tensor(bundle.images), W_t) + b if bundle.n_images else None
    return Encodings(frames=per_video, all_frames=stack(all_rows), images=images)


# ----------------------------
# Decoder state
# ----------------------------


@dataclass(frozen=True)
class DecoderState:
    h: Tensor
    c: Tensor
    selected: frozenset = field(default_factory=frozenset)
    step: int = 0


def init_decoder(params):
    """Empty summary: zero recurrence state, nothing selected."""
    n_h = params["dec.U"].shape[1]
    return DecoderState(h=zeros(n_h), c=zeros(n_h))


def decoder_query(state, params):
    """Summary state used by the attention heads; the start vector is the recurrence input before any frame."""
    if state.step == 0:
        h, _ = lstm_step(params["dec.start"], state.h, state.c, _lstm_weights(params, "dec"))
        return h
    return state.h


def advance_decoder(state, chosen, frame_encoding, params):
    """Feed the chosen frame's encoding through the summary recurrence."""
    chosen = (int(chosen[0]), int(chosen[1]))
    if chosen in state.selected:
        raise ContractError(f"frame {chosen} was already selected")
    weights = _lstm_weights(params, "dec")
    h, c = state.h, state.c
    if state.step == 0:
        h, c = lstm_step(params["dec.start"], h, c, weights)
    h, c = lstm_step(frame_encoding, h, c, weights)
    return DecoderState(h=h, c=c, selected=state.selected | {chosen}, step=state.step + 1)


# ----------------------------
# Attention heads
# ----------------------------


def frame_attention(video_encodings, available, h, params):
    """p(a | v) over the video's unselected frames, and the video context c_t^(v)."""
    w1, W2 = _attention_params(params, "att_frame")
    return attention_op(video_encodings, h, w1, W2, mask=available)


def video_attention(contexts, h, params):
    """
    p(v) over videos with remaining frames and the context c_t.

    `contexts` holds one Tensor per video, or None for exhausted videos (masked to probability 0).
    """
    live = np.array([ctx is not None for ctx in contexts], dtype=bool)
    if not live.any():
        raise EmptySupportError("video_attention: every video is exhausted")
    width = next(ctx for ctx in contexts if ctx is not None).shape[0]
    rows = [ctx if ctx is not None else zeros(width) for ctx in contexts]
    w1, W2 = _attention_params(params, "att_video")
    return attention_op(rows, h, w1, W2, mask=live)


def image_attention(image_encodings, h, frame_encodings, action_mask, params):
    """Image context c_hat and the head distribution softmax(c_hat . enc(a)) over unselected frames."""
    w1, W2 = _attention_params(params, "att_image")
    _, c_hat = attention_op(image_encodings, h, w1, W2)
    scores = matmul(frame_encodings, c_hat)
    return masked_softmax(scores, action_mask), c_hat


def query_attention(bundle, h, remaining, params):
    """
    Text head. Attention inputs are (q . d_v) d_v for videos with remaining frames.

    Returns (pi3 over flat frames, text context c_tilde, p_txt over videos). Each video's mass is
    spread uniformly over its remaining frames.
    """
    counts = np.array([r.sum() for r in remaining])
    live = counts > 0
    if not live.any():
        raise EmptySupportError("query_attention: every video is exhausted")
    similarity = bundle.text_matrix @ bundle.query
    rows = Tensor(similarity[:, None] * bundle.text_matrix)
    w1, W2 = _attention_params(params, "att_query")
    p_txt, c_tilde = attention_op(rows, h, w1, W2, mask=live)
    spread = np.zeros((bundle.total_frames, bundle.n_videos))
    for v, available in enumerate(remaining):
        if counts[v]:
            start = int(bundle.offsets[v])
            spread[start + np.flatnonzero(available), v] = 1.0 / counts[v]
    return matmul(Tensor(spread), p_txt), c_tilde, p_txt


def text_adapter(c_tilde, params):
    hidden = tanh(matmul(params["adapter.W1"], c_tilde) + params["adapter.b1"])
    return matmul(params["adapter.W2"], hidden) + params["adapter.b2"]


def interpolation_weights(c_t, c_hat, c_tilde, h, params):
    """mu over the three heads from an attention over (c_t, c_hat, adapter(c_tilde)); disabled heads get 0."""
    width = c_t.shape[0]
    rows = [
        c_t,
        c_hat if c_hat is not None else zeros(width),
        text_adapter(c_tilde, params) if c_tilde is not None else zeros(width),
    ]
    mask = np.array([True, c_hat is not None, c_tilde is not None])
    w1, W2 = _attention_params(params, "att_mix")
    mu, _ = attention_op(rows, h, w1, W2, mask=mask)
    return mu


# ----------------------------
# Per-step action distribution
# ----------------------------


@dataclass
class StepDistribution:
    probs: Tensor  # [total_frames], flat (video, frame) order
    mu: Tensor  # [3]
    head_probs: tuple  # (pi1, pi2, pi3)
    contexts: tuple  # (c_t, c_hat or None, c_tilde or None)
    video_probs: Tensor
    text_probs: Tensor = None
    action_mask: np.ndarray = None


def action_mask(bundle, selected):
    mask = np.ones(bundle.total_frames, dtype=bool)
    for v, f in selected:
        mask[bundle.flat_index(v, f)] = False
    return mask


def policy_step(bundle, encodings, state, params, cfg):
    """Mixture distribution pi = mu1*pi1 + mu2*pi2 + mu3*pi3 over the unselected frames."""
    mask = action_mask(bundle, state.selected)
    if not mask.any():
        raise EpisodeCompleteError("policy_step: every frame is already selected")
    h = decoder_query(state, params)

    remaining = []
    contexts = []
    frame_probs = []
    for v, video_enc in enumerate(encodings.frames):
        start = int(bundle.offsets[v])
        available = mask[start : start + bundle.videos[v].n_frames]
        remaining.append(available)
        if available.any():
            p_frame, c_v = frame_attention(video_enc, available, h, params)
            frame_probs.append(p_frame)
            contexts.append(c_v)
        else:
            frame_probs.append(None)
            contexts.append(None)
    p_video, c_t = video_attention(contexts, h, params)
    pi1 = concat(
        [
            p_video[v] * p_frame if p_frame is not None else zeros(bundle.videos[v].n_frames)
            for v, p_frame in enumerate(frame_probs)
        ]
    )

    pi2, c_hat = zeros(bundle.total_frames), None
    if cfg.use_image_head and encodings.images is not None:
        pi2, c_hat = image_attention(encodings.images, h, encodings.all_frames, mask, params)

    pi3, c_tilde, p_txt = zeros(bundle.total_frames), None, None
    if cfg.use_query_head:
        pi3, c_tilde, p_txt = query_attention(bundle, h, remaining, params)

    mu = interpolation_weights(c_t, c_hat, c_tilde, h, params)
    probs = mu[0] * pi1 + mu[1] * pi2 + mu[2] * pi3
    return StepDistribution(
        probs=probs,
        mu=mu,
        head_probs=(pi1, pi2, pi3),
        contexts=(c_t, c_hat, c_tilde),
        video_probs=p_video,
        text_probs=p_txt,
        action_mask=mask,
    )


def sequence_log_prob(bundle, params, cfg, actions, encodings=None):
    """Log pi of a given action sequence of (video_idx, frame_idx) pairs, graph-attached."""
    if not actions:
        raise ContractError("sequence_log_prob: empty action sequence")
    encodings = encodings if encodings is not None else encode_frames(bundle, params, cfg)
    state = init_decoder(params)
    terms = []
    for v, f in actions:
        dist = policy_step(bundle, encodings, state, params, cfg)
        flat = bundle.flat_index(v, f)
        if dist.probs.data[flat] <= 0.0:
            raise ContractError(f"sequence_log_prob: action ({v}, {f}) has zero probability")
        terms.append(log(dist.probs[flat]))
        state = advance_decoder(state, (v, f), encodings.all_frames[flat], params)
    return sum(terms[1:], terms[0])

