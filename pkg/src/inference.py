"""
Summary decoding with a trained policy.

Greedy decoding copies the most probable unselected frame at every step (ties
go to the lowest flat index, i.e. the lowest (video_idx, frame_idx)). Sampled
decoding draws from the same distribution the trainer samples from.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from src.databundle import normalize_bundle
from src.diffcore import no_grad
from src.errors import ContractError, FormatError
from src.policy import advance_decoder, encode_frames, init_decoder, policy_step
from src.rewards import PHASE2_WEIGHTS, RewardReport, summary_rewards
from src.trainer import rollout

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SummaryEntry:
    step: int
    video_idx: int
    frame_idx: int
    video_id: str
    prob: float


@dataclass
class Summary:
    event_id: str
    L: int
    entries: list
    rewards: RewardReport
    model_hash: str = None
    mode: str = "greedy"
    seed: int = None
    d_visual: int = None
    d_text: int = None
    config: dict = field(default_factory=dict)

    @property
    def actions(self):
        return [(e.video_idx, e.frame_idx) for e in self.entries]

    def to_dict(self):
        return {
            "event_id": self.event_id,
            "L": self.L,
            "model_hash": self.model_hash,
            "mode": self.mode,
            "seed": self.seed,
            "d_visual": self.d_visual,
            "d_text": self.d_text,
            "entries": [asdict(e) for e in self.entries],
            "rewards": self.rewards.to_dict(),
            "config": self.config,
        }


def _check_length(bundle, L):
    if L < 1 or L > bundle.total_frames:
        raise ContractError(f"summary length {L} must be in [1, {bundle.total_frames}]")


def _package(bundle, actions, probs, cfg, mode, model_hash, seed, weights):
    entries = [
        SummaryEntry(step=t, video_idx=v, frame_idx=f, video_id=bundle.videos[v].video_id, prob=float(p))
        for t, ((v, f), p) in enumerate(zip(actions, probs))
    ]
    return Summary(
        event_id=bundle.event_id,
        L=len(entries),
        entries=entries,
        rewards=summary_rewards(bundle, actions, weights),
        model_hash=model_hash,
        mode=mode,
        seed=seed,
        d_visual=bundle.d_visual,
        d_text=bundle.d_text,
        config=asdict(cfg),
    )


def greedy_actions(bundle, params, cfg, L):
    """Argmax decoding on an already normalized bundle: (actions, probability of each at its step)."""
    _check_length(bundle, L)
    actions, probs = [], []
    with no_grad():
        encodings = encode_frames(bundle, params, cfg)
        state = init_decoder(params)
        for step in range(L):
            dist = policy_step(bundle, encodings, state, params, cfg)
            flat = int(np.argmax(dist.probs.data))
            chosen = bundle.unflat_index(flat)
            actions.append(chosen)
            probs.append(float(dist.probs.data[flat]))
            logger.debug(f"step {step}: frame {chosen} with probability {probs[-1]:.4f}")
            state = advance_decoder(state, chosen, encodings.all_frames[flat], params)
    return actions, probs


def greedy_summarize(bundle, params, cfg, L, model_hash=None, weights=PHASE2_WEIGHTS):
    """Deterministic argmax decoding of an L-frame summary."""
    bundle = normalize_bundle(bundle)
    actions, probs = greedy_actions(bundle, params, cfg, L)
    summary = _package(bundle, actions, probs, cfg, "greedy", model_hash, None, weights)
    logger.info(f"Greedy summary of {bundle.event_id}: L={L}, composite reward {summary.rewards.composite:.4f}")
    return summary


def sample_summarize(bundle, params, cfg, L, seed, model_hash=None, weights=PHASE2_WEIGHTS):
    """Seeded stochastic decoding; the same seed gives the same summary."""
    bundle = normalize_bundle(bundle)
    _check_length(bundle, L)
    with no_grad():
        trace = rollout(bundle, params, cfg, L, np.random.default_rng(seed), weights)
    summary = _package(bundle, list(trace.actions), trace.probs, cfg, "sample", model_hash, seed, weights)
    logger.info(f"Sampled summary of {bundle.event_id}: L={L}, seed={seed}")
    return summary


# ----------------------------
# Summary files
# ----------------------------


def save_summary(summary, path):
    with open(path, "w", encoding="utf-8") as outfile:
        json.dump(summary.to_dict(), outfile, indent=2, ensure_ascii=False)
    logger.info(f"Summary saved to {path}")


def load_summary(path):
    try:
        with open(path, "r", encoding="utf-8") as infile:
            raw = json.load(infile)
    except FileNotFoundError as e:
        raise FormatError("summary file not found", path, None) from e
    except json.JSONDecodeError as e:
        raise FormatError(f"malformed summary JSON: {e}", path, None) from e
    try:
        entries = [
            SummaryEntry(
                step=int(e["step"]),
                video_idx=int(e["video_idx"]),
                frame_idx=int(e["frame_idx"]),
                video_id=str(e["video_id"]),
                prob=float(e["prob"]),
            )
            for e in raw["entries"]
        ]
        rewards = raw["rewards"]
        report = RewardReport(
            rewards["r_div"],
            rewards["r_rep"],
            rewards["r_query"],
            rewards["r_coh"],
            rewards["composite"],
            tuple(rewards.get("flags", ())),
        )
        return Summary(
            event_id=raw["event_id"],
            L=int(raw["L"]),
            entries=entries,
            rewards=report,
            model_hash=raw.get("model_hash"),
            mode=raw.get("mode", "greedy"),
            seed=raw.get("seed"),
            d_visual=raw.get("d_visual"),
            d_text=raw.get("d_text"),
            config=raw.get("config", {}),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"summary is missing or mistypes a field: {e}", path, "entries") from e
