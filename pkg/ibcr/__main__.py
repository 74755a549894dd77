import asyncio
import logging
import os
import sys

from ibcr.adapters.instrumentation import setup_instrumentation
from ibcr.domain.config import create_cli_parser
from ibcr.domain.config import load_settings
from ibcr.domain.errors import IbcrError
from ibcr.domain.models import RunReport
from ibcr.domain.validation import ConfigError
from ibcr.usecases.coordinator import CoordinatorUsecase
from ibcr.usecases.overhead import derive_overhead
from ibcr.usecases.overhead import overhead_lines
from ibcr.usecases.restart import RestartUsecase
from ibcr.usecases.run import RunUsecase


logging.basicConfig(level=logging.INFO)

logger = logging.getLogger(__name__)

EXIT_ERROR = 2


def emit(lines: list[str]) -> None:
    for line in lines:
        print(line)


def report(result: RunReport) -> int:
    emit(result.lines())
    return result.exit_code


def dispatch(args, argv: list[str]) -> int:
    match args.command:
        case "run":
            settings = load_settings(argv)
            setup_instrumentation(settings.instrumentation.logfire_token)
            return report(asyncio.run(RunUsecase(settings).run()))
        case "restart":
            settings = load_settings(argv)
            setup_instrumentation(settings.instrumentation.logfire_token)
            return report(asyncio.run(RestartUsecase(args.image_dir, settings).run()))
        case "coordinator":
            try:
                asyncio.run(CoordinatorUsecase(load_settings(argv)).run())
            except KeyboardInterrupt:
                logger.info("interrupted")
            return 0
        case "overhead":
            emit(overhead_lines(derive_overhead(args.t1, args.o1, args.t2, args.o2)))
            return 0
        case _:
            logger.error("Unknown command: %s", args.command)
            return os.EX_USAGE


def main(argv: list[str] | None = None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    parser = create_cli_parser()
    args = parser.parse_args(argv)
    try:
        code = dispatch(args, argv)
    except (ConfigError, IbcrError) as err:
        logger.error("%s: %s", type(err).__name__, err)
        print(f"outcome=ERROR\nreason={type(err).__name__}: {err}")
        code = EXIT_ERROR
    sys.exit(code)


if __name__ == "__main__":
    main()
