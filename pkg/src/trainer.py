"""
REINFORCE training of the summarization policy.

Each epoch draws `items_per_event` video subsets per event (from a capped
pool of combinations), runs M sampled episodes per item, subtracts a global
moving average baseline from the terminal reward and takes one Adam step per
batch. The reward weights switch from the phase-1 to the phase-2 schedule
after `phase1_epochs`. The policy is scored under the phase-1 weights before
the first update and after the last one.
"""

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from src.databundle import normalize_bundle, select_videos
from src.diffcore import backward, log, no_grad
from src.diffcore_utils import adam_step
from src.errors import ContractError
from src.policy import PolicyConfig, advance_decoder, encode_frames, init_decoder, init_params, policy_step
from src.rewards import PHASE1_WEIGHTS, PHASE2_WEIGHTS, RewardWeights, summary_rewards

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    summary_len: int = 10
    episodes_per_item: int = 5
    batch_size: int = 8
    videos_per_item: int = 6
    max_combinations: int = 4000
    items_per_event: int = 8
    lr: float = 0.01
    weight_decay: float = 1e-5
    baseline_decay: float = 0.9
    phase1_epochs: int = 20
    phase2_epochs: int = 10
    phase1_beta: tuple = PHASE1_WEIGHTS.beta
    phase2_beta: tuple = PHASE2_WEIGHTS.beta
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for name in (
            "summary_len",
            "episodes_per_item",
            "batch_size",
            "videos_per_item",
            "max_combinations",
            "items_per_event",
            "workers",
        ):
            if getattr(self, name) <= 0:
                raise ContractError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ContractError("TrainConfig.lr and weight_decay must be non-negative")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ContractError(f"TrainConfig.baseline_decay must be in [0, 1), got {self.baseline_decay}")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0 or self.phase1_epochs + self.phase2_epochs == 0:
            raise ContractError("TrainConfig needs a non-negative phase split with at least one epoch")
        object.__setattr__(self, "phase1_beta", RewardWeights(self.phase1_beta).beta)
        object.__setattr__(self, "phase2_beta", RewardWeights(self.phase2_beta).beta)

    @classmethod
    def full_scale(cls, **overrides):
        values = dict(summary_len=50, batch_size=32, videos_per_item=10, phase1_epochs=60, phase2_epochs=30)
        values.update(overrides)
        return cls(**values)

    @property
    def total_epochs(self):
        return self.phase1_epochs + self.phase2_epochs

    def phase_of(self, epoch):
        return 1 if epoch < self.phase1_epochs else 2

    def weights_for_epoch(self, epoch):
        return RewardWeights(self.phase1_beta if self.phase_of(epoch) == 1 else self.phase2_beta)


@dataclass
class RolloutTrace:
    actions: tuple  # (video_idx, frame_idx) in selection order
    log_probs: list  # per-step scalar Tensors
    reward_report: object
    probs: tuple = ()  # probability of each chosen action when it was drawn


@dataclass(frozen=True)
class BaselineState:
    b: float = 0.0
    initialized: bool = False


@dataclass
class TrainResult:
    params: object
    policy_config: PolicyConfig
    metrics: list = field(default_factory=list)
    baseline: BaselineState = field(default_factory=BaselineState)
    initial_composite: float = None  # phase-1 weighted, before the first update
    final_composite: float = None  # phase-1 weighted, after the last update

    @property
    def reward_gain(self):
        return self.final_composite / self.initial_composite


# ----------------------------
# Episodes
# ----------------------------


def sample_index(probs, u):
    """Inverse-CDF draw from a (possibly zero-padded) probability vector with one uniform in [0, 1)."""
    cdf = np.cumsum(probs)
    index = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(index, len(probs) - 1)


def rollout(bundle, params, cfg, L, rng, weights=PHASE1_WEIGHTS, encodings=None):
    """Sample one L-frame episode from the policy and score it."""
    if L < 1 or L > bundle.total_frames:
        raise ContractError(f"rollout: summary length {L} does not fit {bundle.total_frames} frames")
    encodings = encodings if encodings is not None else encode_frames(bundle, params, cfg)
    state = init_decoder(params)
    actions, log_probs, probs = [], [], []
    for _ in range(L):
        dist = policy_step(bundle, encodings, state, params, cfg)
        flat = sample_index(dist.probs.data, rng.random())
        chosen = bundle.unflat_index(flat)
        actions.append(chosen)
        probs.append(float(dist.probs.data[flat]))
        log_probs.append(log(dist.probs[flat]))
        state = advance_decoder(state, chosen, encodings.all_frames[flat], params)
    report = summary_rewards(bundle, actions, weights)
    return RolloutTrace(tuple(actions), log_probs, report, tuple(probs))


def baseline_update(state, mean_reward, alpha):
    if not state.initialized:
        return BaselineState(b=float(mean_reward), initialized=True)
    return BaselineState(b=alpha * state.b + (1.0 - alpha) * float(mean_reward), initialized=True)


def reinforce_loss(traces, baseline):
    """-(1/M) sum_episodes (R - b) sum_t log pi(a_t); the advantage is a constant."""
    if not traces:
        raise ContractError("reinforce_loss: no traces")
    terms = []
    for trace in traces:
        if not trace.log_probs or not all(lp.requires_grad for lp in trace.log_probs):
            raise ContractError("reinforce_loss: log-probabilities are detached from the graph")
        advantage = float(trace.reward_report.composite) - float(baseline)
        episode_log_prob = sum(trace.log_probs[1:], trace.log_probs[0])
        terms.append(episode_log_prob * advantage)
    return sum(terms[1:], terms[0]) * (-1.0 / len(traces))


# ----------------------------
# Items and splits
# ----------------------------


def combination_pool(n_videos, k, cap, rng):
    """Up to `cap` distinct sorted k-subsets of range(n_videos); all of them when they fit."""
    if math.comb(n_videos, k) <= cap:
        return list(itertools.combinations(range(n_videos), k))
    pool = set()
    while len(pool) < cap:
        pool.add(tuple(sorted(int(i) for i in rng.choice(n_videos, size=k, replace=False))))
    return sorted(pool)


def leave_one_out(dataset, event_id):
    """(training events, held-out event) for per-event cross-validation."""
    held = [b for b in dataset if b.event_id == event_id]
    if not held:
        raise ContractError(f"leave_one_out: no event named {event_id!r}")
    return [b for b in dataset if b.event_id != event_id], held[0]


def _item_traces(item, params, policy_cfg, cfg, weights, seed_key):
    rng = np.random.default_rng(seed_key)
    encodings = encode_frames(item, params, policy_cfg)
    return [
        rollout(item, params, policy_cfg, cfg.summary_len, rng, weights, encodings)
        for _ in range(cfg.episodes_per_item)
    ]


def policy_reward(bundles, params, policy_cfg, L, weights, episodes=5, seed=0):
    """Mean composite of `episodes` sampled summaries per normalized bundle, without recording a graph."""
    rewards = []
    with no_grad():
        for index, bundle in enumerate(bundles):
            rng = np.random.default_rng((seed, index))
            encodings = encode_frames(bundle, params, policy_cfg)
            for _ in range(episodes):
                trace = rollout(bundle, params, policy_cfg, L, rng, weights, encodings)
                rewards.append(trace.reward_report.composite)
    return float(np.mean(rewards))


def _epoch_metrics(epoch, phase, reports, baseline):
    return {
        "epoch": epoch,
        "phase": phase,
        "mean_r_div": float(np.mean([r.r_div for r in reports])),
        "mean_r_rep": float(np.mean([r.r_rep for r in reports])),
        "mean_r_query": float(np.mean([r.r_query for r in reports])),
        "mean_r_coh": float(np.mean([r.r_coh for r in reports])),
        "mean_composite": float(np.mean([r.composite for r in reports])),
        "baseline": float(baseline.b),
    }


def train(dataset, cfg, policy_cfg=None, params=None, metrics_path=None):
    """Train (or continue training) the policy; returns a TrainResult with the per-epoch metrics log."""
    if not dataset:
        raise ContractError("train: empty dataset")
    bundles = [normalize_bundle(b) for b in dataset]
    if policy_cfg is None:
        policy_cfg = PolicyConfig(d_visual=bundles[0].d_visual, d_text=bundles[0].d_text)
    if params is None:
        params = init_params(policy_cfg, seed=cfg.seed)
    logger.info(f"Training config: {json.dumps(asdict(cfg))}")
    logger.info(f"Policy config: {json.dumps(asdict(policy_cfg))}")

    rng = np.random.default_rng(cfg.seed)
    pools = []
    for bundle in bundles:
        k = cfg.videos_per_item
        if bundle.n_videos < k:
            logger.warning(
                f"Event {bundle.event_id} has {bundle.n_videos} videos, fewer than videos_per_item={k}; using all"
            )
            k = bundle.n_videos
        pools.append(combination_pool(bundle.n_videos, k, cfg.max_combinations, rng))

    reference = RewardWeights(cfg.phase1_beta)
    initial = policy_reward(bundles, params, policy_cfg, cfg.summary_len, reference, cfg.episodes_per_item, cfg.seed)
    logger.info(f"Initial composite (phase-1 weights): {initial:.4f}")

    metrics_file = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    baseline = BaselineState()
    history = []
    try:
        for epoch in range(cfg.total_epochs):
            phase = cfg.phase_of(epoch)
            weights = cfg.weights_for_epoch(epoch)
            items = []
            for bundle, pool in zip(bundles, pools):
                for _ in range(cfg.items_per_event):
                    items.append(select_videos(bundle, pool[int(rng.integers(len(pool)))]))
            for item in items:
                if cfg.summary_len > item.total_frames:
                    raise ContractError(
                        f"summary_len {cfg.summary_len} exceeds the {item.total_frames} frames of an item "
                        f"from {item.event_id}"
                    )
            order = rng.permutation(len(items))

            reports = []
            for start in range(0, len(items), cfg.batch_size):
                batch = [items[i] for i in order[start : start + cfg.batch_size]]
                keys = [(cfg.seed, epoch, start + j) for j in range(len(batch))]
                if cfg.workers > 1:
                    # rollouts only read parameters; the reduction below stays in item order
                    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
                        futures = [
                            executor.submit(_item_traces, item, params, policy_cfg, cfg, weights, key)
                            for item, key in zip(batch, keys)
                        ]
                        traces_per_item = [future.result() for future in futures]
                else:
                    traces_per_item = [
                        _item_traces(item, params, policy_cfg, cfg, weights, key) for item, key in zip(batch, keys)
                    ]

                losses = []
                for traces in traces_per_item:
                    mean_reward = float(np.mean([t.reward_report.composite for t in traces]))
                    b_value = baseline.b if baseline.initialized else mean_reward
                    losses.append(reinforce_loss(traces, b_value))
                    baseline = baseline_update(baseline, mean_reward, cfg.baseline_decay)
                    reports.extend(t.reward_report for t in traces)
                loss = sum(losses[1:], losses[0]) * (1.0 / len(losses))
                params.zero_grad()
                backward(loss)
                params.fill_missing_grads()
                adam_step(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
                logger.debug(f"epoch {epoch} batch {start // cfg.batch_size}: loss {loss.item():.6f}")

            if params.has_nonfinite():
                raise ContractError(f"training produced non-finite parameters in epoch {epoch}")
            metrics = _epoch_metrics(epoch, phase, reports, baseline)
            history.append(metrics)
            logger.info(
                f"epoch {epoch} (phase {phase}): composite {metrics['mean_composite']:.4f}, "
                f"baseline {metrics['baseline']:.4f}"
            )
            if metrics_file:
                metrics_file.write(json.dumps(metrics) + "\n")
                metrics_file.flush()
    finally:
        if metrics_file:
            metrics_file.close()
    final = policy_reward(bundles, params, policy_cfg, cfg.summary_len, reference, cfg.episodes_per_item, cfg.seed)
    logger.info(f"Final composite (phase-1 weights): {final:.4f} (x{final / initial:.2f})")
    return TrainResult(
        params=params,
        policy_config=policy_cfg,
        metrics=history,
        baseline=baseline,
        initial_composite=initial,
        final_composite=final,
    )
