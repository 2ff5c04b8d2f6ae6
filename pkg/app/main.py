"""
Command-line entry point: `python -m app.main <subcommand> [options]`.

Exit codes: 0 success, 1 config error, 2 runtime error, 3 remote transport error.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence
import argparse
import json
import logging
import sys

import numpy as np
from pythonjsonlogger import jsonlogger

from app import __version__
from app.config import get_settings
from app.core.constructive import build_family_learner, build_single_learner, tail_invariance_check, verify_eventual_learning
from app.core.exceptions import ConfigError, LabError, RemoteError
from app.core.experiments import (
    COLLAPSE_COLUMNS,
    ISOLATION_COLUMNS,
    MODULUS_COLUMNS,
    NTS_COLUMNS,
    PERIODIC_COLUMNS,
    POSITIONAL_COLUMNS,
    SCATTER_COLUMNS,
    SSMAX_COLUMNS,
    collapse_probe,
    continuity_modulus,
    continuity_scatter,
    critical_period,
    isolation_demo,
    nts_positional,
    nts_zero,
    periodic_eval,
    ssmax_compare,
)
from app.core.numeric import RngStream
from app.core.sequences import BINARY, parse_sequence_spec
from app.core.serialization import load_model, save_model
from app.core.trainer import train
from app.core.transformer import TransformerModel, build_random_model, check_compactness, with_ssmax
from app.models.remote_client import PAIR_COLUMNS, RemoteNextTokenModel, prompt_pair_sensitivity
from app.models.schemas import ModelSource
from app.utils.config_loader import effective_config, merge_overrides, validate_config
from app.utils.results import run_directory, utc_now, write_csv, write_json, write_manifest

logger = logging.getLogger(__name__)
settings = get_settings()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_REMOTE = 3


def setup_logging(level: Optional[str] = None, fmt: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """Configura o root logger: texto ou JSON em stderr, arquivo opcional"""
    level = (level or settings.LOG_LEVEL).upper()
    fmt = fmt or settings.LOG_FORMAT
    log_file = settings.LOG_FILE if log_file is None else log_file

    if fmt == "json":
        formatter: logging.Formatter = jsonlogger.JsonFormatter(LOG_FORMAT)
    else:
        formatter = logging.Formatter(LOG_FORMAT)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    for handler in handlers:
        handler.setFormatter(formatter)
    logging.basicConfig(level=level, handlers=handlers, force=True)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class LabArgumentParser(argparse.ArgumentParser):
    """Erros de uso viram ConfigError (exit 1) em vez de SystemExit(2)"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _list(cast: Callable[[str], Any]) -> Callable[[str], List[Any]]:
    def parse(raw: str) -> List[Any]:
        try:
            return [cast(item) for item in raw.split(",") if item.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid list {raw!r}")

    return parse


def _shape(raw: str):
    u, v = raw.split(":")
    return [float(u), float(v)]


def _common(parser: argparse.ArgumentParser, model_flags: bool = True) -> None:
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--out", default=None, help=f"output root (default {settings.OUTPUT_DIR})")
    parser.add_argument("--seed", type=int, help="master seed; generated and printed when omitted")
    parser.add_argument("--log-level", help="logging level (env LOG_LEVEL)")
    parser.add_argument("--log-format", choices=["text", "json"], help="log format (env LOG_FORMAT)")
    if model_flags:
        group = parser.add_argument_group("model source")
        group.add_argument("--model", help="model JSON saved by construct/train")
        group.add_argument("--remote-url", help="base URL of a completions-compatible endpoint")
        group.add_argument("--remote-model", help="model name sent to the endpoint")
        group.add_argument("--auth-env", help="environment variable holding the bearer token")
        group.add_argument("--api", choices=["completions", "chat"], help="wire protocol variant")
        group.add_argument("--top-k", type=int, help="logprobs requested per call")
        group.add_argument("--ssmax", type=float, help="wrap the local model in ssmax with this s")


def build_parser() -> argparse.ArgumentParser:
    parser = LabArgumentParser(prog="cpe-lab", description=f"{settings.PROJECT_NAME} v{__version__}")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("construct", help="build a constructive learner and save it")
    _common(p, model_flags=False)
    p.add_argument("kind", choices=["single", "family"])
    p.add_argument("--target", help="single learner target spec, e.g. constant0")
    p.add_argument("--eta", type=float)
    p.add_argument("--periods", type=_list(int), help="family periods, e.g. 2,3,5")
    p.add_argument("--sharpness", type=float)
    p.add_argument("--max-lag", type=int)
    p.add_argument("--horizon", type=int, help="compactness check horizon")
    p.add_argument("--output", help="where to write the model JSON")

    p = sub.add_parser("train", help="train the standard compact model")
    _common(p, model_flags=False)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--context", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--periods", type=_list(int), help="mixture of Periodic(0^(p-1)1), equal weights")
    p.add_argument("--mixture", type=_list(str), help="mixture spec list, equal weights")
    p.add_argument("--output", help="where to write the model JSON")

    p = sub.add_parser("nts", help="next-token sensitivity on the all-zero prompt")
    _common(p)
    p.add_argument("--gamma", type=_list(float), dest="gammas")
    p.add_argument("--samples", type=int)
    p.add_argument("--length", type=int)

    p = sub.add_parser("nts-positional", help="NTS with Beta-Binomial perturbation positions")
    _common(p)
    p.add_argument("--gamma", type=float)
    p.add_argument("--shapes", type=_list(_shape), help="u:v pairs, e.g. 1:8,8:1")
    p.add_argument("--samples", type=int)
    p.add_argument("--length", type=int)

    p = sub.add_parser("periodic", help="periodic continuation success and certainty")
    _common(p)
    p.add_argument("--periods", type=_list(int))
    p.add_argument("--reps", type=_list(int))
    p.add_argument("--steps", type=int)

    p = sub.add_parser("critical-period", help="smallest period the model fails to continue")
    _common(p)
    p.add_argument("--r", type=int)
    p.add_argument("--p-max", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--stop-at-first", action="store_true", default=None)

    p = sub.add_parser("modulus", help="empirical continuity modulus")
    _common(p)
    p.add_argument("--gamma", type=_list(float), dest="gammas")
    p.add_argument("--ns", type=_list(int))
    p.add_argument("--samples", type=int)
    p.add_argument("--base", help="base sequence spec")

    p = sub.add_parser("collapse", help="agreement with the true next symbol under perturbation")
    _common(p)
    p.add_argument("--spec")
    p.add_argument("--gamma", type=_list(float), dest="gammas")
    p.add_argument("--samples", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--eps", type=float, dest="epsilon")
    p.add_argument("--n0", type=int)

    p = sub.add_parser("isolation", help="refutation on Periodic(0^(k-1)1) for a learner of 0^omega")
    _common(p)
    p.add_argument("--ks", type=_list(int))
    p.add_argument("--horizon", type=int)
    p.add_argument("--eps", type=float, dest="epsilon")
    p.add_argument("--n0", type=int)

    p = sub.add_parser("ssmax-compare", help="NTS of a model against its ssmax twin")
    _common(p)
    p.add_argument("--s", type=float)
    p.add_argument("--gamma", type=_list(float), dest="gammas")
    p.add_argument("--samples", type=int)
    p.add_argument("--length", type=int)

    p = sub.add_parser("pair-sensitivity", help="P(sigma|alpha) vs P(sigma|beta) on a remote endpoint")
    _common(p)
    p.add_argument("--pairs-file", help="JSON list of [alpha, beta] prompt pairs")

    p = sub.add_parser("verify", help="finite-horizon eventual-learning check")
    _common(p)
    p.add_argument("--spec")
    p.add_argument("--spec-b", help="second spec for the finite-difference check")
    p.add_argument("--eps", type=float)
    p.add_argument("--n0", type=int)
    p.add_argument("--N", type=int)

    p = sub.add_parser("scatter", help="(d_H, output distance) pairs around the all-zero prompt")
    _common(p)
    p.add_argument("--counts", type=_list(int))
    p.add_argument("--samples", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--delta", type=float)

    p = sub.add_parser("mock-server", help="serve the bundled mock completions endpoint")
    p.add_argument("--responder", choices=["constant", "flip-detector", "periodic"], default="constant")
    p.add_argument("--period", type=int, default=3)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--log-level")
    p.add_argument("--log-format", choices=["text", "json"])

    return parser


# ---------------------------------------------------------------------------
# Config assembly
# ---------------------------------------------------------------------------

OVERRIDE_FIELDS = {
    "construct": ["horizon", "output"],
    "train": ["steps", "lr", "d", "k", "context", "batch_size", "output"],
    "nts": ["gammas", "samples", "length"],
    "nts-positional": ["gamma", "shapes", "samples", "length"],
    "periodic": ["periods", "reps", "steps"],
    "critical-period": ["r", "p_max", "steps", "stop_at_first"],
    "modulus": ["gammas", "ns", "samples", "base"],
    "collapse": ["spec", "gammas", "samples", "n", "epsilon", "n0"],
    "isolation": ["ks", "horizon", "epsilon", "n0"],
    "ssmax-compare": ["s", "gammas", "samples", "length"],
    "pair-sensitivity": ["pairs_file"],
    "verify": ["spec", "spec_b", "eps", "n0", "N"],
    "scatter": ["counts", "samples", "length", "delta"],
}


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")


def _model_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    if getattr(args, "model", None):
        return {"file": args.model}
    if getattr(args, "remote_url", None):
        remote = {"base_url": args.remote_url, "model": args.remote_model or "default"}
        for name in ("auth_env", "api", "top_k"):
            if getattr(args, name) is not None:
                remote[name] = getattr(args, name)
        return {"remote": remote}
    return {}


def assemble_config(args: argparse.Namespace) -> Dict[str, Any]:
    """Config JSON (opcional) + flags da linha de comando"""
    data: Dict[str, Any] = _read_json(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigError("Config must be a JSON object")
    if data.setdefault("experiment", args.command) != args.command:
        raise ConfigError(f"Config is for {data['experiment']!r}, not {args.command!r}")

    overrides = {name: getattr(args, name, None) for name in OVERRIDE_FIELDS[args.command]}
    if args.seed is not None:
        overrides["seed"] = args.seed
    data = merge_overrides(data, overrides)

    if args.command == "construct":
        source = {"construct": args.kind}
        for name in ("target", "eta", "periods", "sharpness", "max_lag"):
            if getattr(args, name) is not None:
                source[name] = getattr(args, name)
        data["model"] = {**(data.get("model") or {}), **source}
    elif args.command == "train":
        if args.periods:
            data["mixture"] = [{"spec": "periodic:" + "0" * (p - 1) + "1"} for p in args.periods]
        elif args.mixture:
            data["mixture"] = [{"spec": spec} for spec in args.mixture]
    else:
        source = _model_overrides(args)
        if source:
            data["model"] = source
        if getattr(args, "ssmax", None) is not None:
            data.setdefault("model", {})["ssmax"] = args.ssmax
    return data


def generated_seed() -> int:
    return int(np.random.SeedSequence().entropy % (2 ** 32))


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

@dataclass
class RunOutput:
    columns: Sequence[str] = ()
    rows: List[Dict[str, Any]] = field(default_factory=list)
    documents: Dict[str, Any] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    model: Any = None
    saved: List[Path] = field(default_factory=list)


def resolve_model(source: ModelSource):
    """ModelSource -> TransformerModel ou RemoteNextTokenModel"""
    if source.remote is not None:
        if source.ssmax is not None:
            raise ConfigError("ssmax only applies to local models")
        return RemoteNextTokenModel(source.remote)
    if source.construct == "single":
        model = build_single_learner(parse_sequence_spec(source.target), source.eta)
    elif source.construct == "family":
        model = build_family_learner(source.periods, source.sharpness, source.max_lag)
    elif source.file is not None:
        model = load_model(source.file)
    else:
        spec = source.random
        model = build_random_model(BINARY, spec.d, spec.k, RngStream(spec.seed), spec.pe_kind, spec.weight_kind)
    return with_ssmax(model, source.ssmax) if source.ssmax is not None else model


def _local(model, experiment: str) -> TransformerModel:
    if not isinstance(model, TransformerModel):
        raise ConfigError(f"{experiment} needs a local model (construct, file or random)")
    return model


def _rows(results) -> List[Dict[str, Any]]:
    return [r.to_row() for r in results]


def run_construct(config, directory: Path) -> RunOutput:
    model = resolve_model(config.model)
    path = Path(config.output) if config.output else directory / "model.json"
    save_model(model, path)
    report = check_compactness(model, config.horizon)
    return RunOutput(documents={"compactness.json": report.to_dict()},
                     summary={"model": str(path), "compact": report.passed}, saved=[path])


def run_train(config, directory: Path, argv: List[str]) -> RunOutput:
    result = train(config, argv)
    path = Path(config.output) if config.output else directory / "model.json"
    save_model(result.model, path)
    rows = [{"step": step + 1, "loss": loss} for step, loss in enumerate(result.losses)]
    return RunOutput(("step", "loss"), rows, {"training.json": result.manifest},
                     {"model": str(path), "final_loss": result.manifest["summary"]["final_loss"]}, saved=[path])


def run_nts(config, model) -> RunOutput:
    results = nts_zero(model, config.gammas, config.samples, config.length, config.seed)
    return RunOutput(NTS_COLUMNS, _rows(results), summary={"base_token": results[0].base_token if results else None})


def run_nts_positional(config, model) -> RunOutput:
    results = nts_positional(model, [tuple(s) for s in config.shapes], config.gamma, config.samples,
                             config.length, config.seed)
    return RunOutput(POSITIONAL_COLUMNS, _rows(results))


def run_periodic(config, model) -> RunOutput:
    results = periodic_eval(model, config.periods, config.reps, config.steps, config.seed)
    return RunOutput(PERIODIC_COLUMNS, _rows(results),
                     summary={"successes": sum(r.success for r in results), "cells": len(results)})


def run_critical_period(config, model) -> RunOutput:
    result = critical_period(model, config.r, config.p_max, config.steps, config.seed, config.stop_at_first)
    return RunOutput(PERIODIC_COLUMNS, _rows(result.results), summary={"critical_period": result.critical})


def run_modulus(config, model) -> RunOutput:
    cells = continuity_modulus(model, config.gammas, config.ns, config.samples, config.seed,
                               parse_sequence_spec(config.base))
    return RunOutput(MODULUS_COLUMNS, _rows(cells))


def run_collapse(config, model) -> RunOutput:
    rows = collapse_probe(model, parse_sequence_spec(config.spec), config.gammas, config.samples, config.n, config.seed,
                          config.epsilon, config.n0)
    return RunOutput(COLLAPSE_COLUMNS, _rows(rows))


def run_isolation(config, model) -> RunOutput:
    report = isolation_demo(_local(model, "isolation"), config.ks, config.horizon, config.epsilon, config.n0)
    return RunOutput(ISOLATION_COLUMNS, _rows(report.rows), {"baseline.json": report.baseline.to_dict()},
                     {"all_refuted": report.all_refuted, "baseline": report.baseline.verdict})


def run_ssmax_compare(config, model) -> RunOutput:
    base = _local(model, "ssmax-compare")
    scaled = _local(resolve_model(config.scaled), "ssmax-compare") if config.scaled else with_ssmax(base, config.s)
    rows, mean = ssmax_compare(base, scaled, config.gammas, config.samples, config.length, config.seed)
    return RunOutput(SSMAX_COLUMNS, _rows(rows), summary={"mean_difference": mean})


def run_pair_sensitivity(config, model) -> RunOutput:
    pairs = [tuple(p) for p in config.pairs]
    if config.pairs_file:
        loaded = _read_json(config.pairs_file)
        if not isinstance(loaded, list) or any(not isinstance(p, list) or len(p) != 2 for p in loaded):
            raise ConfigError(f"{config.pairs_file} must hold a list of [alpha, beta] pairs")
        pairs.extend(tuple(p) for p in loaded)
    rows = prompt_pair_sensitivity(model, pairs, config.seed)
    table = [{"index": i, **row.model_dump()} for i, row in enumerate(rows)]
    return RunOutput(PAIR_COLUMNS, table, summary={"sensitive": sum(r.sensitive for r in rows)})


def run_verify(config, model) -> RunOutput:
    model = _local(model, "verify")
    spec = parse_sequence_spec(config.spec)
    if config.spec_b is not None:
        report = tail_invariance_check(model, spec, parse_sequence_spec(config.spec_b), config.eps, config.n0, config.N)
        return RunOutput(documents={"witness.json": report.to_dict()},
                         summary={"verdict": report.witness_a.verdict, "passed": report.passed})
    witness = verify_eventual_learning(model, spec, config.eps, config.n0, config.N)
    return RunOutput(documents={"witness.json": witness.to_dict()}, summary={"verdict": witness.verdict})


def run_scatter(config, model) -> RunOutput:
    points = continuity_scatter(model, config.counts, config.samples, config.length, config.delta, config.seed)
    return RunOutput(SCATTER_COLUMNS, _rows(points))


HANDLERS = {
    "nts": run_nts,
    "nts-positional": run_nts_positional,
    "periodic": run_periodic,
    "critical-period": run_critical_period,
    "modulus": run_modulus,
    "collapse": run_collapse,
    "isolation": run_isolation,
    "ssmax-compare": run_ssmax_compare,
    "pair-sensitivity": run_pair_sensitivity,
    "verify": run_verify,
    "scatter": run_scatter,
}


def execute(args: argparse.Namespace, argv: List[str]) -> Dict[str, Any]:
    started = utc_now()
    config = validate_config(assemble_config(args))
    seed = config.seed
    if seed is None:
        seed = generated_seed()
        print(f"Generated seed: {seed}", file=sys.stderr)
        logger.info(f"Generated seed: {seed}")
    config = config.model_copy(update={"seed": seed})

    logger.info("=" * 50)
    logger.info(f"Running {config.experiment} (seed={seed}) with {settings.PROJECT_NAME} v{__version__}")
    logger.info("=" * 50)

    directory = run_directory(args.out or settings.OUTPUT_DIR, config.experiment, seed)
    model = None
    if config.experiment == "construct":
        output = run_construct(config, directory)
    elif config.experiment == "train":
        output = run_train(config, directory, argv)
    else:
        model = resolve_model(config.model)
        try:
            output = HANDLERS[config.experiment](config, model)
        except RemoteError as e:
            if isinstance(model, RemoteNextTokenModel):
                write_manifest(directory, argv, config.experiment, effective_config(config), seed, started, [],
                               model.requests, {"error": e.error_code})
            raise

    outputs: List[Path] = list(output.saved)
    if output.columns:
        outputs.append(write_csv(directory / "results.csv", output.columns, output.rows))
    for name, document in output.documents.items():
        outputs.append(write_json(directory / name, document))
    effective = effective_config(config)
    outputs.append(write_json(directory / "effective-config.json", effective))
    requests = model.requests if isinstance(model, RemoteNextTokenModel) else []
    write_manifest(directory, argv, config.experiment, effective, seed, started, outputs, requests, output.summary)
    logger.info(f"Results written to {directory}")
    return {"experiment": config.experiment, "seed": seed, "directory": str(directory), **output.summary}


def serve_mock(args: argparse.Namespace) -> int:
    from app.api.mock_server import serve
    from app.api.responders import build_responder

    kwargs = {"period": args.period} if args.responder == "periodic" else {}
    serve(build_responder(args.responder, **kwargs), args.host, args.port)
    return EXIT_OK


def run(argv: Optional[List[str]] = None) -> int:
    """
    Executa um subcomando e devolve o exit code

    Args:
        argv: Argumentos (sys.argv[1:] se None)

    Returns:
        int: 0 sucesso, 1 config, 2 runtime, 3 transporte remoto
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        setup_logging(args.log_level, args.log_format)
        if args.command == "mock-server":
            return serve_mock(args)
        summary = execute(args, argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_OK
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RemoteError as e:
        print(f"remote error [{e.error_code}]: {e}", file=sys.stderr)
        return EXIT_REMOTE
    except LabError as e:
        print(f"error [{e.error_code}]: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"Unexpected failure: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
