"""
Main entry point: command-line access to the check catalog and the experiment runner.
"""

import argparse
import json
import logging
import sys

from pme_lab.checks import list_checks
from pme_lab.config import LOG_LEVEL, VERSION
from pme_lab.errors import ConfigError, PmeLabError
from pme_lab.runner import EXIT_CONFIG, EXIT_RUNTIME, run, versions

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pme_lab", description="Numerical verification lab for PME/FDE estimates")
    sub = parser.add_subparsers(dest="command", required=True)

    run_cmd = sub.add_parser("run", help="run the checks of an experiment config")
    run_cmd.add_argument("config", help="path to a JSON experiment config")
    run_cmd.add_argument("--parallel", action="store_true", default=None, help="run checks concurrently")
    run_cmd.add_argument("--output-dir", default=None, help="override the output directory")

    list_cmd = sub.add_parser("list-checks", help="list the check catalog")
    list_cmd.add_argument("--json", action="store_true", help="print ids, descriptions and default parameters")

    sub.add_parser("version", help="print package and library versions")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "version":
        print(VERSION)
        for name, version in versions().items():
            if name != "pme_lab":
                print(f"{name} {version}")
        return 0

    if args.command == "list-checks":
        catalog = list_checks()
        if args.json:
            print(json.dumps(catalog, indent=2, default=str))
        else:
            for entry in catalog:
                print(f"{entry['id']:<22} {entry['description']}")
        return 0

    try:
        report, code = run(args.config, parallel=args.parallel, output_dir=args.output_dir)
    except ConfigError as e:
        for field, reason in e.problems:
            logger.error(f"Config error in {field}: {reason}")
        return EXIT_CONFIG
    except PmeLabError as e:
        logger.error(f"Run aborted: {e}")
        return EXIT_RUNTIME
    except OSError as e:
        logger.error(f"Could not write the report: {e}")
        return EXIT_RUNTIME

    for result in report.results:
        print(f"{result.id:<22} {result.status}")
    print(f"overall: {report.overall}")
    return code


if __name__ == "__main__":
    logging.basicConfig(
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
    )
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Interrupted")
        sys.exit(EXIT_RUNTIME)
