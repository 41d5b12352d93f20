"""
REINFORCE estimator checks on a frozen instance small enough to enumerate:
2 videos x 3 frames, summaries of length 2, so 30 ordered action sequences.
"""

import itertools

import numpy as np
import pytest

from src.diffcore import backward, no_grad
from src.policy import encode_frames, init_params, sequence_log_prob
from src.policy_utils import toy_bundle, toy_config
from src.rewards import PHASE2_WEIGHTS, summary_rewards
from src.trainer import BaselineState, RolloutTrace, baseline_update, reinforce_loss, rollout

CFG = toy_config(4)


def flat_grads(params):
    return np.concatenate([p.grad.reshape(-1) for _, p in params.items()])


@pytest.fixture(scope="module")
def enumeration():
    """Probability, reward, grad log pi and REINFORCE loss gradient of every length-2 action sequence."""
    params = init_params(CFG, seed=4)
    bundle = toy_bundle(CFG.d_visual, CFG.d_text, seed=6)
    pairs = [bundle.unflat_index(i) for i in range(bundle.total_frames)]
    sequences = list(itertools.permutations(pairs, 2))
    log_probs, rewards, grads, loss_grads = [], [], [], []
    for seq in sequences:
        report = summary_rewards(bundle, seq, PHASE2_WEIGHTS)
        params.zero_grad()
        lp = sequence_log_prob(bundle, params, CFG, list(seq))
        log_probs.append(lp.item())
        backward(lp)
        params.fill_missing_grads()
        grads.append(flat_grads(params))

        params.zero_grad()
        trace = RolloutTrace(seq, [sequence_log_prob(bundle, params, CFG, list(seq))], report)
        backward(reinforce_loss([trace], 0.0))
        params.fill_missing_grads()
        loss_grads.append(flat_grads(params))
        rewards.append(report.composite)
    params.zero_grad()
    return {
        "params": params,
        "bundle": bundle,
        "sequences": sequences,
        "probs": np.exp(log_probs),
        "rewards": np.array(rewards),
        "grads": np.stack(grads),
        "loss_grads": np.stack(loss_grads),
    }


def sampled_sequences(enumeration, n, seed):
    """Indices into the enumeration of `n` episodes drawn by the policy's own rollout sampler."""
    index = {seq: i for i, seq in enumerate(enumeration["sequences"])}
    bundle, params = enumeration["bundle"], enumeration["params"]
    rng = np.random.default_rng(seed)
    draws = []
    with no_grad():
        encodings = encode_frames(bundle, params, CFG)
        for _ in range(n):
            trace = rollout(bundle, params, CFG, 2, rng, PHASE2_WEIGHTS, encodings)
            draws.append(index[trace.actions])
    return np.array(draws)


# ----------------------------
# Exact quantities
# ----------------------------


def test_sequence_probabilities_sum_to_one(enumeration):
    """The 30 ordered length-2 sequences carry all of the policy's probability mass."""
    assert len(enumeration["sequences"]) == 30
    total = enumeration["probs"].sum()
    assert abs(total - 1.0) < 1e-10, f"Sequence probabilities sum to {total}"


def test_score_function_has_zero_mean(enumeration):
    """E[grad log pi] vanishes, so subtracting a baseline adds no bias."""
    mean_score = enumeration["probs"] @ enumeration["grads"]
    assert np.allclose(mean_score, 0.0, atol=1e-10), "E[grad log pi] must vanish, so baselines add no bias"


def test_rollout_scores_match_enumeration(enumeration):
    """Sampled episodes report the same log-probability and reward as the enumeration."""
    table = dict(zip(enumeration["sequences"], np.log(enumeration["probs"])))
    rewards = dict(zip(enumeration["sequences"], enumeration["rewards"]))
    rng = np.random.default_rng(0)
    for _ in range(5):
        trace = rollout(enumeration["bundle"], enumeration["params"], CFG, 2, rng, PHASE2_WEIGHTS)
        total = sum(lp.item() for lp in trace.log_probs)
        assert np.isclose(total, table[trace.actions]), f"Rollout log-prob of {trace.actions} disagrees"
        assert np.isclose(trace.reward_report.composite, rewards[trace.actions])


def test_loss_gradient_is_negated_weighted_score(enumeration):
    """With a zero baseline the loss gradient of one episode is -R grad log pi."""
    expected = -enumeration["rewards"][:, None] * enumeration["grads"]
    assert np.allclose(enumeration["loss_grads"], expected, atol=1e-12)


def test_loss_gradient_with_baseline_is_shifted_score(enumeration):
    """A baseline b moves the loss gradient of an episode by b grad log pi."""
    bundle, params = enumeration["bundle"], enumeration["params"]
    seq = enumeration["sequences"][7]
    report = summary_rewards(bundle, seq, PHASE2_WEIGHTS)
    trace = RolloutTrace(seq, [sequence_log_prob(bundle, params, CFG, list(seq))], report)
    params.zero_grad()
    backward(reinforce_loss([trace], 0.25))
    params.fill_missing_grads()
    got = flat_grads(params)
    params.zero_grad()
    expected = enumeration["loss_grads"][7] + 0.25 * enumeration["grads"][7]
    assert np.allclose(got, expected, atol=1e-12)


# ----------------------------
# Monte-Carlo agreement
# ----------------------------


def test_monte_carlo_gradient_matches_exhaustive(enumeration):
    """Loss gradients averaged over sampled rollouts converge to the exact policy gradient."""
    probs, rewards, grads = enumeration["probs"], enumeration["rewards"], enumeration["grads"]
    exact = (probs * rewards) @ grads

    n = 20_000
    draws = sampled_sequences(enumeration, n, seed=0)
    # the loss is minimized, so its gradient is the negated ascent direction
    per_draw = -enumeration["loss_grads"][draws]
    estimate = per_draw.mean(axis=0)
    stderr = per_draw.std(axis=0) / np.sqrt(n)

    z = np.abs(estimate - exact) / np.maximum(stderr, 1e-300)
    tight = np.abs(estimate - exact) <= 3 * stderr + 1e-12
    assert tight.mean() >= 0.95, f"Only {tight.mean():.3f} of gradient entries are within 3 standard errors"
    assert np.all(np.abs(estimate - exact) <= 5 * stderr + 1e-12), f"Largest deviation {z.max():.2f} SE"


def test_baseline_reduces_estimator_variance(enumeration):
    """The moving-average baseline lowers the variance of the batch gradient over sampled rollouts."""
    rewards, grads, loss_grads = enumeration["rewards"], enumeration["grads"], enumeration["loss_grads"]
    idx = sampled_sequences(enumeration, 5000, seed=1).reshape(1000, 5)

    plain = -loss_grads[idx].mean(axis=1)
    state = BaselineState()
    with_baseline = []
    for batch in idx:
        mean_reward = float(rewards[batch].mean())
        b = state.b if state.initialized else mean_reward
        with_baseline.append(-(loss_grads[batch] + b * grads[batch]).mean(axis=0))
        state = baseline_update(state, mean_reward, 0.9)
    with_baseline = np.stack(with_baseline)

    var_plain = plain.var(axis=0).sum()
    var_baseline = with_baseline.var(axis=0).sum()
    assert var_baseline <= var_plain, f"Baseline variance {var_baseline:.4e} exceeds plain {var_plain:.4e}"
