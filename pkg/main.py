import argparse
import logging
import sys

from seqcomm_dfl.controllers.experiment import MODES, ExperimentSpec, parse_seeds, run
from seqcomm_dfl.utils.errors import ConfigError
from seqcomm_dfl.utils.logger import log_error, log_info, set_log_level


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="SeqComm-DFL: decision-focused training with value-aware sequential communication")
    parser.add_argument("--config", type=str, default=None, help="Experiment JSON (defaults if omitted)")
    parser.add_argument("--mode", type=str, default="train", choices=MODES)
    parser.add_argument("--seeds", type=str, default="0", help="Seed list, e.g. '1..10' or '1,2,3'")
    parser.add_argument("--out", type=str, default="runs", help="Output directory")
    parser.add_argument("--ablation", type=str, default=None,
                        help="Ablation for train/eval, or 'comm_dim' for the ablate sweep")
    parser.add_argument("--iters", type=int, default=None, help="Override the outer iteration count")
    parser.add_argument("--eval-episodes", type=int, default=10, help="Greedy episodes per seed in eval mode")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_log_level(logging.DEBUG)
    try:
        seeds = parse_seeds(args.seeds)
    except ConfigError as e:
        log_error(str(e), "Main")
        return 2
    spec = ExperimentSpec(
        config_path=args.config, mode=args.mode, seeds=seeds, out_dir=args.out,
        ablation=args.ablation, iters=args.iters, eval_episodes=args.eval_episodes,
    )
    log_info(f"Starting SeqComm-DFL ({args.mode})", "Main")
    return run(spec)


if __name__ == '__main__':
    sys.exit(main())
