"""
Command-line entry point: ``vgrpo-lab <pretrain|posttrain|ablate|eval>``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

from .config import ConfigManager
from .controllers import AblationController, ExperimentController, GRIDS
from .utils.exceptions import EXIT_OK, VgrpoLabError, exit_code_for

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = 'vgrpo_lab.log'

logger = logging.getLogger(__name__)


def setup_logging(level: str):
    """Console logging; the run-directory file handler is added once the config is known."""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def add_file_handler(run_dir: str) -> logging.Handler:
    os.makedirs(run_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(run_dir, LOG_FILE))
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='vgrpo-lab', description='Desk-scale V-GRPO experiments')
    parser.add_argument('command', choices=['pretrain', 'posttrain', 'ablate', 'eval'])
    parser.add_argument('--config', help='JSON run configuration')
    parser.add_argument('--seed', type=int, help='global seed override')
    parser.add_argument('--out', help='output directory override')
    parser.add_argument('--resume', help='policy checkpoint to start from')
    parser.add_argument('--grid', choices=sorted(GRIDS), default='variance_reduction',
                        help='ablation grid (ablate only)')
    parser.add_argument('--oracle', action='store_true', help='also run the analytic checks (eval only)')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    return parser


def run(args: argparse.Namespace) -> int:
    overrides = {'run.seed': args.seed, 'run.output_dir': args.out, 'run.resume': args.resume}
    handler = None
    try:
        if args.command == 'ablate':
            controller = AblationController(args.grid, args.config, overrides)
            handler = add_file_handler(controller.root)
            controller.run()
            return EXIT_OK

        manager = ConfigManager(args.config, overrides)
        controller = ExperimentController(manager)
        handler = add_file_handler(controller.run_dir)
        if args.command == 'pretrain':
            controller.run_pretrain()
        elif args.command == 'posttrain':
            controller.run_posttrain()
        else:
            controller.run_eval(oracle=args.oracle)
        return EXIT_OK
    except VgrpoLabError as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed (exit {code}): {e.message}")
        return code
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    return run(args)


if __name__ == '__main__':
    sys.exit(main())
