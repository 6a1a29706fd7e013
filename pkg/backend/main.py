# backend/main.py
import argparse
import json
import logging
import os
import sys

# Add the project's root directory to the Python path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pandas as pd
from pydantic import ValidationError

from backend.config import settings
from backend.exceptions import ConfigurationError
from backend.schemas.pipeline_schemas import PipelineConfig
from backend.schemas.simulation_schemas import SimulationGrid
from backend.services import pipeline_service
from backend.services.pipeline_service import EXIT_IO, EXIT_USAGE

logger = logging.getLogger(__name__)


class _UsageParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors are exit code 1 here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    value = value.lower()
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    parser = _UsageParser(prog="aec", description=f"{settings.PROJECT_NAME} {settings.PROJECT_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_UsageParser)

    process = sub.add_parser("process", help="Cancel echo in one microphone/reference pair")
    process.add_argument("--mic", required=True)
    process.add_argument("--ref", required=True)
    process.add_argument("--out", required=True)
    _add_pipeline_flags(process)

    evaluate = sub.add_parser("eval", help="Score a simulation manifest")
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--out", default=None, help="Results CSV (default: results.csv next to the manifest)")
    evaluate.add_argument("--workers", type=int, default=None)
    _add_pipeline_flags(evaluate)

    simulate = sub.add_parser("simulate", help="Render the SER/SNR condition grid")
    simulate.add_argument("--grid", default=None, help="JSON file with SimulationGrid fields")
    simulate.add_argument("--out-dir", required=True)
    simulate.add_argument("--seed", type=int, default=None)
    simulate.add_argument("--sources", default=None,
                          help="Tab-separated file of near-end and far-end WAV paths, one pair per line")
    simulate.add_argument("--utterances", type=int, default=None)
    return parser


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON pipeline configuration")
    parser.add_argument("--filter", choices=["mdf", "wrls", "none"], default=None)
    parser.add_argument("--tde", type=_on_off, default=None)
    parser.add_argument("--combo", type=str.upper, choices=["DX", "EX", "DEY", "NONE"], default=None)
    parser.add_argument("--model", dest="model_path", default=None)
    parser.add_argument("--random-model-seed", type=int, default=None)
    parser.add_argument("--subband", type=_on_off, default=None)
    parser.add_argument("--mode", choices=["offline", "streaming"], default=None)


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {key: getattr(args, key, None) for key in
                 ("filter", "tde", "combo", "model_path", "random_model_seed", "subband", "mode", "workers")}
    return PipelineConfig.from_sources(args.config, overrides)


def _simulation_grid(args: argparse.Namespace) -> SimulationGrid:
    values = {"chunk_s": settings.SIMULATION_CHUNK_S}
    if args.grid:
        try:
            with open(args.grid, "r", encoding="utf-8") as fh:
                values.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Could not read grid file {args.grid}: {e}") from e
    if args.seed is not None:
        values["seed"] = args.seed
    if args.utterances is not None:
        values["utterances"] = args.utterances
    try:
        return SimulationGrid(**values)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid simulation grid: {e}") from e


def _read_sources(path):
    if not path:
        return None
    try:
        pairs = pd.read_csv(path, sep="\t", header=None, names=["near", "far"], comment="#")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ConfigurationError(f"Could not read source list {path}: {e}") from e
    return list(pairs.itertuples(index=False, name=None))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            result = pipeline_service.cmd_simulate(_simulation_grid(args), args.out_dir, _read_sources(args.sources))
        else:
            config = _pipeline_config(args)
            if args.command == "process":
                result = pipeline_service.cmd_process(args.mic, args.ref, args.out, config)
            else:
                result = pipeline_service.cmd_eval(args.manifest, config, args.out)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    if result["status"] != "success":
        print(f"error: {result['message']}", file=sys.stderr)
        return result.get("exit_code", EXIT_IO)

    print(result["message"])
    if args.command == "process":
        print(json.dumps(result["report"], indent=2))
    elif args.command == "eval":
        print(result["table"])
        if result["conditions"]:
            print("\nERLE (dB) by SNR (rows) and SER (columns), far-end single-talk:")
            print(result["conditions"])
    return result["exit_code"]


def main() -> None:
    logging.basicConfig(level=settings.LOG_LEVEL, format='%(asctime)s - %(levelname)s - %(processName)s - %(message)s')
    sys.exit(run())


if __name__ == "__main__":
    main()
