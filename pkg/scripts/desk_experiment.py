import os
import sys

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.databundle import SyntheticSpec, generate_synthetic  # noqa: E402
from src.evalkit import EvalConfig, bench_linear, best_of_lengths, random_baseline, summary_f1  # noqa: E402
from src.inference import greedy_summarize  # noqa: E402
from src.policy import PolicyConfig, init_params  # noqa: E402
from src.trainer import TrainConfig, train  # noqa: E402


def compare_with_random(dataset, result, L, random_seeds, eval_cfg):
    """Mean greedy F1 and mean random F1 at summary length L."""
    greedy_scores, random_scores = [], []
    for bundle in dataset:
        summary = greedy_summarize(bundle, result.params, result.policy_config, L)
        greedy_scores.append(summary_f1(bundle, summary.actions, eval_cfg).f1)
        random_scores.append(random_baseline(bundle, L, random_seeds, eval_cfg).mean)
    return float(np.mean(greedy_scores)), float(np.mean(random_scores))


def run_experiment(seed=42, random_seeds=20, wide_len=10):
    """
    Train on the default synthetic dataset and compare greedy decoding with random summaries.

    The policy is trained and compared at the size of the reference summary, where
    F1 can reach 1. The comparison is repeated at `wide_len`, whose F1 ceiling is
    bounded by the small reference. The composite gain is measured under the
    phase-1 weights before and after training, with the same rollout seeds.
    """
    spec = SyntheticSpec(seed=seed)
    dataset = generate_synthetic(spec)
    L = spec.n_relevant
    cfg = TrainConfig(summary_len=L, seed=0)
    print(f"Training on {len(dataset)} events for {cfg.total_epochs} epochs at L={L} ...")
    result = train(dataset, cfg)
    print(
        f"Composite reward: before {result.initial_composite:.4f}, after {result.final_composite:.4f} "
        f"(x{result.reward_gain:.2f})"
    )

    eval_cfg = EvalConfig()
    greedy, random = compare_with_random(dataset, result, L, random_seeds, eval_cfg)
    print(f"L={L}: mean greedy F1 {greedy:.3f}, mean random F1 {random:.3f}, gap {greedy - random:.3f}")
    wide_greedy, wide_random = compare_with_random(dataset, result, wide_len, random_seeds, eval_cfg)
    print(f"L={wide_len}: mean greedy F1 {wide_greedy:.3f}, mean random F1 {wide_random:.3f}")

    lengths = range(max(1, L - 2), L + 3)
    best_scores = []
    for bundle in dataset:
        per_length, best = best_of_lengths(bundle, result.params, result.policy_config, lengths, eval_cfg)
        best_scores.append(per_length[best])
    print(f"Mean best-of-lengths F1 {np.mean(best_scores):.3f} over L in {list(lengths)}")

    bench_cfg = PolicyConfig(16, 8)
    report = bench_linear(init_params(bench_cfg), bench_cfg, [500, 1000, 2000, 4000], L=30, repeats=3)
    print(f"Greedy decode runtime: r2 {report.r2:.3f}, doubling ratios {[round(r, 2) for r in report.ratios]}")

    return {
        "reward_ratio": result.reward_gain,
        "greedy_f1": greedy,
        "random_f1": random,
        "gap": greedy - random,
        "bench_r2": report.r2,
        "bench_last_ratio": report.ratios[-1],
    }


if __name__ == "__main__":
    outcome = run_experiment()
    passed = (
        outcome["reward_ratio"] >= 1.2
        and outcome["gap"] >= 0.10
        and outcome["bench_r2"] >= 0.98
        and 1.6 <= outcome["bench_last_ratio"] <= 2.6
    )
    print("Desk experiment " + ("passed." if passed else "did NOT reach the acceptance targets."))
    sys.exit(0 if passed else 1)
