"""
Command-line entry point: `qamvs <subcommand> ...`.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 contract or
assertion failure (a failed gradient check included).
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict

from src.databundle import SyntheticSpec, generate_synthetic
from src.databundle_utils import load_bundle, load_dataset, load_synthetic_spec, save_dataset
from src.errors import ContractError, DegenerateInputError, FormatError, QamvsError
from src.evalkit import EvalConfig, bench_linear, evaluate_summary, save_report
from src.inference import greedy_summarize, load_summary, sample_summarize, save_summary
from src.policy import PolicyConfig
from src.policy_utils import check_policy_gradients, load_model, model_hash, save_model
from src.trainer import TrainConfig, leave_one_out, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONTRACT = 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors raised instead of exiting with status 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _frame_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    defaults = SyntheticSpec()
    train_defaults = TrainConfig()
    parser = ArgumentParser(prog="qamvs", description="Query-aware multi-video summarization engine.")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    gen = sub.add_parser("gen", help="Generate a synthetic dataset.")
    gen.add_argument("--out", required=True)
    gen.add_argument("--events", type=int, default=defaults.n_events)
    gen.add_argument("--videos", type=int, default=defaults.n_videos)
    gen.add_argument("--frames", type=int, default=defaults.frames_per_video)
    gen.add_argument("--images", type=int, default=defaults.n_images)
    gen.add_argument("--dim-visual", type=int, default=defaults.d_visual)
    gen.add_argument("--dim-text", type=int, default=defaults.d_text)
    gen.add_argument("--concepts", type=int, default=defaults.n_concepts)
    gen.add_argument("--relevance", type=float, default=defaults.relevance_fraction)
    gen.add_argument("--noise", type=float, default=defaults.noise_scale)
    gen.add_argument("--seed", type=int, default=defaults.seed)

    tr = sub.add_parser("train", help="Train a policy on a dataset directory.")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--summary-len", type=int, default=train_defaults.summary_len)
    tr.add_argument("--epochs-phase1", type=int, default=train_defaults.phase1_epochs)
    tr.add_argument("--epochs-phase2", type=int, default=train_defaults.phase2_epochs)
    tr.add_argument("--lr", type=float, default=train_defaults.lr)
    tr.add_argument("--weight-decay", type=float, default=train_defaults.weight_decay)
    tr.add_argument("--batch", type=int, default=train_defaults.batch_size)
    tr.add_argument("--episodes", type=int, default=train_defaults.episodes_per_item)
    tr.add_argument("--videos-per-item", type=int, default=train_defaults.videos_per_item)
    tr.add_argument("--items-per-event", type=int, default=train_defaults.items_per_event)
    tr.add_argument("--seed", type=int, default=train_defaults.seed)
    tr.add_argument("--workers", type=int, default=train_defaults.workers)
    tr.add_argument("--holdout", default=None, help="Event id left out of training.")
    tr.add_argument("--metrics", default=None, help="Per-epoch metrics log (JSON lines).")
    tr.add_argument("--no-image-head", action="store_true")
    tr.add_argument("--no-query-head", action="store_true")

    sm = sub.add_parser("summarize", help="Decode a summary of one event.")
    sm.add_argument("--model", required=True)
    sm.add_argument("--bundle", required=True)
    sm.add_argument("--len", type=int, required=True, dest="length")
    sm.add_argument("--out", required=True)
    sm.add_argument("--sample", action="store_true", help="Sample from the policy instead of greedy decoding.")
    sm.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="F1 of a summary against the event's ground truth.")
    ev.add_argument("--summary", required=True)
    ev.add_argument("--bundle", required=True)
    ev.add_argument("--threshold", type=float, default=EvalConfig().match_threshold)
    ev.add_argument("--aggregate", choices=("avg", "max"), default="avg")
    ev.add_argument("--out", default=None)

    gc = sub.add_parser("gradcheck", help="Finite-difference check of the policy gradients.")
    gc.add_argument("--dim", type=int, default=8)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--seed", type=int, default=0)

    bn = sub.add_parser("bench", help="Greedy decoding runtime against the number of frames.")
    bn.add_argument("--model", required=True)
    bn.add_argument("--frames", type=_frame_list, required=True, help="Comma-separated frame counts.")
    bn.add_argument("--len", type=int, required=True, dest="length")
    bn.add_argument("--repeats", type=int, default=1)
    bn.add_argument("--out", default=None)
    return parser


# ----------------------------
# Subcommands
# ----------------------------


def _emit(payload, path):
    if path:
        with open(path, "w", encoding="utf-8") as outfile:
            json.dump(payload, outfile, indent=2, ensure_ascii=False)
        logger.info(f"Wrote {path}")
    else:
        print(json.dumps(payload, indent=2, ensure_ascii=False))


def cmd_gen(args):
    spec = SyntheticSpec(
        n_events=args.events,
        n_videos=args.videos,
        frames_per_video=args.frames,
        n_images=args.images,
        d_visual=args.dim_visual,
        d_text=args.dim_text,
        n_concepts=args.concepts,
        relevance_fraction=args.relevance,
        noise_scale=args.noise,
        seed=args.seed,
    )
    logger.info(f"Synthetic spec: {json.dumps(asdict(spec))}")
    save_dataset(generate_synthetic(spec), args.out, spec)
    return EXIT_OK


def cmd_train(args):
    dataset = load_dataset(args.data)
    spec = load_synthetic_spec(args.data)
    if spec is not None:
        logger.info(f"Dataset generated from {json.dumps(asdict(spec))}")
    if args.holdout:
        dataset, held = leave_one_out(dataset, args.holdout)
        logger.info(f"Holding out {held.event_id}; training on {len(dataset)} events")
        if not dataset:
            raise ContractError("no events left to train on after the holdout")
    cfg = TrainConfig(
        summary_len=args.summary_len,
        episodes_per_item=args.episodes,
        batch_size=args.batch,
        videos_per_item=args.videos_per_item,
        items_per_event=args.items_per_event,
        lr=args.lr,
        weight_decay=args.weight_decay,
        phase1_epochs=args.epochs_phase1,
        phase2_epochs=args.epochs_phase2,
        seed=args.seed,
        workers=args.workers,
    )
    policy_cfg = PolicyConfig(
        d_visual=dataset[0].d_visual,
        d_text=dataset[0].d_text,
        use_image_head=not args.no_image_head,
        use_query_head=not args.no_query_head,
    )
    result = train(dataset, cfg, policy_cfg, metrics_path=args.metrics)
    extra = {"train_config": asdict(cfg), "events": [b.event_id for b in dataset], "holdout": args.holdout}
    extra["composite"] = {"initial": result.initial_composite, "final": result.final_composite}
    if spec is not None:
        extra["synthetic_spec"] = asdict(spec)
    digest = save_model(args.out, result.params, result.policy_config, extra)
    logger.info(f"Model hash {digest}")
    return EXIT_OK


def cmd_summarize(args):
    params, cfg, _ = load_model(args.model)
    digest = model_hash(args.model)
    bundle = load_bundle(args.bundle)
    if args.sample:
        summary = sample_summarize(bundle, params, cfg, args.length, args.seed, model_hash=digest)
    else:
        summary = greedy_summarize(bundle, params, cfg, args.length, model_hash=digest)
    save_summary(summary, args.out)
    return EXIT_OK


def cmd_eval(args):
    summary = load_summary(args.summary)
    bundle = load_bundle(args.bundle)
    report = evaluate_summary(summary, bundle, EvalConfig(match_threshold=args.threshold, aggregate=args.aggregate))
    logger.info(f"{report['event_id']}: F1 {report['mean_f1']:.4f} at threshold {report['threshold']}")
    if args.out:
        save_report(report, args.out)
    else:
        _emit(report, None)
    return EXIT_OK


def cmd_gradcheck(args):
    report = check_policy_gradients(dim=args.dim, tol=args.tol, seed=args.seed)
    name, worst = report.worst()
    if not report.passed:
        for param, indices in report.flagged.items():
            logger.error(f"Gradient mismatch in {param} at flat indices {list(indices)}")
        logger.error(f"Gradient check failed: worst relative error {worst:.3e} in {name} (tol {args.tol})")
        return EXIT_CONTRACT
    logger.info(f"Gradient check passed: worst relative error {worst:.3e} in {name} (tol {args.tol})")
    return EXIT_OK


def cmd_bench(args):
    params, cfg, _ = load_model(args.model)
    report = bench_linear(params, cfg, args.frames, args.length, repeats=args.repeats)
    logger.info(f"Linear fit: slope {report.slope:.3e} s/frame, R^2 {report.r2:.4f}")
    _emit(report.to_dict(), args.out)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "summarize": cmd_summarize,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def dispatch(argv):
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return COMMANDS[args.command](args)
    except (FormatError, DegenerateInputError, OSError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except QamvsError as e:
        logger.error(f"Contract violation: {e}")
        return EXIT_CONTRACT


def main():
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
