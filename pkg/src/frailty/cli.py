"""Command line entry point: ``frailty <stage> --config run.toml``.

Exit codes: 0 success, 1 usage or configuration error, 2 input data error,
3 missing or stale upstream artifacts.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .cohort import DataError
from .markers import DefinitionError
from .pipeline import STAGE_FUNCS, ConfigError, PipelineConfig, PipelineError, Run, run_stage
from .synthetic import SpecError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DEPENDENCY = 0, 1, 2, 3

COMMANDS = {
    "synth": "generate a synthetic cohort (config needs [synthetic])",
    "ingest": "load administrative flow files (config needs [flows])",
    "markers": "extract marker levels for every subject",
    "screen": "prevalence, protective and stepwise-vote screening",
    "select": "forward selection of the FI variables",
    "score": "average ranks and FI for every subject",
    "report": "write tables and figure data",
    "robustness": "re-run selection under scenarios a, b and c",
    "run": "run every stage from cohort to report",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="frailty", description="Poset-based frailty index pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in COMMANDS.items():
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--config", "-c", required=True, help="TOML run configuration")
        s.add_argument("--output-dir", "-o", help="artifact directory (default: config output_dir, "
                                                  "then $FRAILTY_OUTPUT_DIR)")
        s.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
        s.add_argument("--force", action="store_true", help="re-run even if artifacts are up to date")
        s.add_argument("--verbose", "-v", action="count", default=0)
        if name in ("report", "run"):
            s.add_argument("--which", default="all", help="comma-separated report ids, or 'all'")
    return p


def _stages(command: str, config: PipelineConfig) -> list[str]:
    if command == "synth":
        if not config.synthetic:
            raise ConfigError("'synth' needs a [synthetic] section; use 'ingest' for flow files")
        return ["cohort"]
    if command == "ingest":
        if config.synthetic:
            raise ConfigError("'ingest' needs a [flows] section; use 'synth' for synthetic data")
        return ["cohort"]
    if command == "run":
        return ["cohort", "markers", "screen", "select", "score", "robustness", "report"]
    return [command]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = PipelineConfig.load(args.config)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        run = Run(config, config.output_dir(args.output_dir), args.threads)
        for stage in _stages(args.command, config):
            if stage == "report":
                from .reports import emit_report

                written = emit_report(run, [w.strip() for w in args.which.split(",") if w.strip()])
                print(f"report: {len(written)} files in {run.dir / 'reports'}")
            else:
                assert stage in STAGE_FUNCS
                done = run_stage(run, stage, args.force)
                print(f"{stage}: {'done' if done else 'up to date'}")
    except ConfigError as exc:
        print(f"frailty: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"frailty: {exc}", file=sys.stderr)
        return exc.exit_code
    except (DataError, DefinitionError, SpecError) as exc:
        print(f"frailty: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
