import argparse
import asyncio
import logging
import sys

from spdefield.config import COMMANDS, apply_overrides, load_config, validate
from spdefield.dispatcher import Dispatcher
from spdefield.errors import SpdeFieldError
from spdefield.handlers import covariance, darcy, mlmc, sample

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spdefield",
        description="Gaussian random fields via the SPDE approach and MLMC for Darcy flow.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="campaign config (INI)")
    parser.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    parser.add_argument("--threads", type=int, help="worker threads")
    parser.add_argument("--out", dest="out_dir", help="output directory")
    parser.add_argument("--samples", type=int, help="number of samples")
    parser.add_argument("--pair", action="store_true", default=None, help="also write the coupled coarse field")
    parser.add_argument("--format", choices=("csv", "binary"), help="field dump format")
    parser.add_argument("--no-embed", action="store_true", help="sample on the physical domain only")
    parser.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return parser


def build_dispatcher() -> Dispatcher:
    dp = Dispatcher()
    dp.include_router(sample.router)
    dp.include_router(mlmc.router)
    dp.include_router(covariance.router)
    dp.include_router(darcy.router)
    return dp


async def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )

    try:
        config = load_config(args.config)
        apply_overrides(
            config,
            command=args.command,
            seed=args.seed,
            threads=args.threads,
            out_dir=args.out_dir,
            samples=args.samples,
            pair=args.pair,
            format=args.format,
            no_embed=args.no_embed,
            log_level=args.log_level,
        )
        logging.getLogger().setLevel(config.run.log_level.upper())
        validate(config)
    except SpdeFieldError as e:
        log.error("%s", e)
        return e.exit_code
    except ValueError as e:
        log.error("bad log level: %s", e)
        return 2

    log.info("%s started (seed %d, %d thread(s))", config.command, config.run.seed, config.run.threads)
    code = await build_dispatcher().dispatch(config)
    log.info("%s finished with exit code %d", config.command, code)
    return code


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
