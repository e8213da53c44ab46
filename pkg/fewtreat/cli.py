"""Command line front end.

    fewtreat estimate --input panel.csv --scheme event_study
    fewtreat infer --input panel.csv --hetero panel_agg --B 10000 --seed 7
    fewtreat simulate --input dgp.json --seed 3 --output panel.csv
    fewtreat coverage --input dgp.json --replications 2000 --format json

Flags override entries of the ``--config`` JSON file, which override the
defaults. Every artifact carries the run seed and the fingerprint of the
resolved configuration.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import logging.config
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, Literal

import pandas as pd
import yaml
from opentelemetry import trace
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fewtreat import constants
from fewtreat.confidence import NORMALIZERS, ci_scalar, uniform_band
from fewtreat.design import SCHEME_KINDS, UNIFORM_PRE_KINDS, GenericWeights, build_scheme
from fewtreat.estimator import control_residuals, point_estimate
from fewtreat.exception_handlers import EXIT_OK, UsageError, handle_exception
from fewtreat.hetero import HETERO_KINDS, HeteroSpec, fit, normalize
from fewtreat.montecarlo import coverage_experiment, load_dgp_config, simulate_panel
from fewtreat.panel import ColumnMap, load_panel
from fewtreat.resample import draw
from fewtreat.util import canonical_json, file_fingerprint, fingerprint, markdown_template

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

COMMANDS = ("estimate", "infer", "simulate", "coverage")


class RunConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    command: Literal["estimate", "infer", "simulate", "coverage"]
    input: str = Field(description="Panel CSV, or a simulation config for simulate and coverage")
    scheme: Literal["att", "event_study", "pretrends", "generic"] = "att"
    weights: str | None = Field(default=None, description="Generic scheme weights JSON")
    hetero: Literal["identity", "panel_agg", "repeated_cs"] = "identity"
    sv_floor: float | None = Field(default=None, ge=0)
    alpha: float = Field(default=constants.DEFAULT_ALPHA, gt=0, lt=1)
    n_draws: int | None = Field(default=None, ge=1, alias="B")
    seed: int | None = Field(
        default=None,
        ge=0,
        description="Resampling seed, or the replication key for simulate. "
        "Defaults to 0, or to the simulation config seed for coverage",
    )
    normalizer: Literal["constant", "studentized"] = "studentized"
    output: str | None = Field(default=None, description="Output path, stdout if unset")
    format: Literal["csv", "json", "md"] | None = Field(
        default=None, description="csv, or json for coverage, when unset"
    )
    export_draws: str | None = Field(default=None, description="CSV path for the draws")
    replications: int = Field(
        default=constants.DEFAULT_REPLICATIONS, ge=constants.MIN_REPLICATIONS
    )
    columns: ColumnMap = Field(default_factory=ColumnMap)
    log_level: str | None = None

    @model_validator(mode="after")
    def check_combinations(self) -> RunConfig:
        if self.scheme == "generic" and self.weights is None:
            raise ValueError("the generic scheme needs --weights")
        if self.scheme != "generic" and self.weights is not None:
            raise ValueError("--weights only applies to --scheme generic")
        if self.hetero == "repeated_cs" and self.scheme not in UNIFORM_PRE_KINDS:
            raise ValueError(
                f"unsupported combination: --hetero repeated_cs with --scheme {self.scheme}, "
                "use panel_agg or identity"
            )
        if self.export_draws is not None and self.command != "infer":
            raise ValueError("--export-draws only applies to infer")
        if self.format is None:
            self.format = "json" if self.command == "coverage" else "csv"
        return self

    @property
    def draws(self) -> int:
        if self.n_draws is not None:
            return self.n_draws
        if self.command == "coverage":
            return constants.DEFAULT_COVERAGE_DRAWS
        return constants.DEFAULT_DRAWS

    def echo(self) -> dict[str, Any]:
        """The resolved configuration written into artifacts.

        Output locations are not part of it.
        """
        payload = self.model_dump(
            mode="json",
            by_alias=True,
            exclude={"log_level", "output", "export_draws"},
        )
        payload["B"] = self.draws
        try:
            payload["input_sha256"] = file_fingerprint(self.input)
            if self.weights is not None:
                payload["weights_sha256"] = file_fingerprint(self.weights)
        except OSError as e:
            raise UsageError(f"cannot read input: {e}") from e
        return payload


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="fewtreat",
        description="Difference in differences inference with few treated units",
        argument_default=argparse.SUPPRESS,
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)
    for command in COMMANDS:
        sub = commands.add_parser(command, argument_default=argparse.SUPPRESS)
        sub.add_argument("--input", help="Panel CSV, or a simulation config JSON")
        sub.add_argument("--config", help="JSON file of run options, flags take precedence")
        sub.add_argument("--scheme", choices=SCHEME_KINDS)
        sub.add_argument("--weights", help="Weights JSON for the generic scheme")
        sub.add_argument("--hetero", choices=HETERO_KINDS)
        sub.add_argument("--sv-floor", dest="sv_floor", type=float)
        sub.add_argument("--alpha", type=float)
        sub.add_argument("--B", dest="B", type=int, help="Number of resample draws")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--normalizer", choices=NORMALIZERS)
        sub.add_argument("--output", help="Output file, stdout when omitted")
        sub.add_argument("--format", choices=("csv", "json", "md"))
        sub.add_argument("--export-draws", dest="export_draws")
        sub.add_argument("--replications", type=int)
        sub.add_argument("--log-level", dest="log_level")

    return parser


def parse_config(argv: Sequence[str] | None) -> RunConfig:
    namespace = vars(build_parser().parse_args(argv))
    options: dict[str, Any] = {}
    config_path = namespace.pop("config", None)
    if config_path is not None:
        try:
            options = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config file {config_path}: {e}") from e
        if not isinstance(options, dict):
            raise UsageError(f"config file {config_path} must hold a JSON object")
        options.pop("command", None)

    options.update(namespace)
    if "input" not in options:
        raise UsageError("--input is required, on the command line or in --config")

    try:
        return RunConfig.model_validate(options)
    except ValidationError as e:
        raise UsageError(f"invalid options: {e}") from e


@functools.cache
def _start_otel() -> None:
    constants.configure_otel()


def configure_logging(level: str | None = None) -> None:
    try:
        with open(constants.LOG_CONFIG_PATH, encoding="utf-8") as f:
            logging.config.dictConfig(yaml.safe_load(f))
    except OSError as e:
        raise UsageError(f"cannot read logging config: {e}") from e

    if constants.DEBUG:
        level = "DEBUG"
    if level is not None:
        try:
            logging.getLogger("fewtreat").setLevel(level.upper())
        except ValueError as e:
            raise UsageError(f"unknown log level {level!r}") from e

    if constants.ENFORCE_OTEL:
        _start_otel()


def _load_weights(config: RunConfig) -> GenericWeights | None:
    if config.weights is None:
        return None

    try:
        return GenericWeights.model_validate_json(
            Path(config.weights).read_text(encoding="utf-8")
        )
    except OSError as e:
        raise UsageError(f"cannot read weights file {config.weights}: {e}") from e
    except ValidationError as e:
        raise UsageError(f"invalid weights file {config.weights}: {e}") from e


def _emit(text: str, output: str | None) -> None:
    if output is None:
        sys.stdout.write(text)
        return

    Path(output).write_text(text, encoding="utf-8", newline="\n")


def _csv(frame: pd.DataFrame, seed: int, config_fingerprint: str) -> str:
    frame = frame.copy()
    frame["seed"] = seed
    frame["config_fingerprint"] = config_fingerprint
    return frame.to_csv(index=False, lineterminator="\n")


def _json(payload: dict[str, Any]) -> str:
    return canonical_json(payload, indent=2) + "\n"


def run_estimate(config: RunConfig) -> int:
    seed = config.seed or 0
    echo = config.echo()
    config_fingerprint = fingerprint(echo)

    panel = load_panel(config.input, config.columns)
    scheme = build_scheme(config.scheme, panel, _load_weights(config))
    estimate = point_estimate(panel, scheme)

    match config.format:
        case "csv":
            text = _csv(estimate.to_frame(), seed, config_fingerprint)
        case "json":
            text = _json(
                {
                    "config": echo,
                    "config_fingerprint": config_fingerprint,
                    "seed": seed,
                    "estimate": estimate.to_dict(),
                }
            )
        case _:
            text = markdown_template(
                "estimate.md.jinja",
                {
                    "rows": estimate.to_frame().to_dict(orient="records"),
                    "scheme": config.scheme,
                    "seed": seed,
                    "config_fingerprint": config_fingerprint,
                },
            )

    _emit(text, config.output)
    return EXIT_OK


def run_infer(config: RunConfig) -> int:
    seed = config.seed or 0
    echo = config.echo()
    config_fingerprint = fingerprint(echo)

    panel = load_panel(config.input, config.columns)
    scheme = build_scheme(config.scheme, panel, _load_weights(config))
    estimate = point_estimate(panel, scheme)
    residuals = control_residuals(panel, scheme)
    fitted = fit(HeteroSpec(kind=config.hetero, sv_floor=config.sv_floor), residuals, panel)
    normalized = normalize(residuals, fitted, panel)
    draws = draw(normalized, fitted, panel, config.draws, seed)
    if scheme.k_target == 1:
        band = ci_scalar(estimate, draws, config.alpha)
    else:
        band = uniform_band(estimate, draws, config.alpha, config.normalizer)

    match config.format:
        case "csv":
            text = _csv(band.to_frame(), seed, config_fingerprint)
        case "json":
            text = _json(
                {
                    "config": echo,
                    "config_fingerprint": config_fingerprint,
                    "seed": seed,
                    "band": band.to_dict(),
                    "estimate": estimate.to_dict(),
                    "hetero": fitted.to_dict(),
                    "draws": draws.summary(),
                }
            )
        case _:
            text = markdown_template(
                "band.md.jinja",
                {
                    "band": band,
                    "rows": band.to_frame().to_dict(orient="records"),
                    "scheme": config.scheme,
                    "hetero": config.hetero,
                    "seed": seed,
                    "config_fingerprint": config_fingerprint,
                },
            )

    if config.export_draws is not None:
        _emit(
            _csv(draws.to_frame().drop(columns="seed"), seed, config_fingerprint),
            config.export_draws,
        )

    _emit(text, config.output)
    logger.info(
        "Inference finished",
        extra={
            "scheme": config.scheme,
            "hetero": config.hetero,
            "draws": config.draws,
            "critical_value": band.critical_value,
        },
    )
    return EXIT_OK


def run_simulate(config: RunConfig) -> int:
    if config.format != "csv":
        raise UsageError("simulate writes panels as csv only")

    dgp = load_dgp_config(config.input)
    seed = config.seed or 0
    echo = config.echo()
    echo["seed"] = seed
    simulated = simulate_panel(dgp, seed)
    _emit(
        _csv(simulated.panel.to_frame(), seed, fingerprint(echo)),
        config.output,
    )
    return EXIT_OK


def run_coverage(config: RunConfig) -> int:
    dgp = load_dgp_config(config.input)
    if config.seed is not None:
        dgp = dgp.model_copy(update={"seed": config.seed})
    seed = dgp.seed
    echo = config.echo()
    echo["seed"] = seed
    config_fingerprint = fingerprint(echo)

    report = coverage_experiment(
        dgp,
        config.scheme,
        config.hetero,
        config.alpha,
        config.replications,
        config.draws,
        normalizer=config.normalizer,
        weights=_load_weights(config),
        sv_floor=config.sv_floor,
    )

    match config.format:
        case "csv":
            text = _csv(report.records_frame(), seed, config_fingerprint)
        case "json":
            text = _json(
                {
                    "config": echo,
                    "config_fingerprint": config_fingerprint,
                    "seed": seed,
                    "report": report.model_dump(mode="json"),
                }
            )
        case _:
            text = markdown_template(
                "coverage.md.jinja",
                {
                    "report": report,
                    "rows": list(
                        zip(
                            report.labels,
                            report.coverage,
                            report.coverage_se,
                            report.mean_width,
                        )
                    ),
                    "seed": seed,
                    "config_fingerprint": config_fingerprint,
                },
            )

    _emit(text, config.output)
    return EXIT_OK


RUNNERS: dict[str, Callable[[RunConfig], int]] = {
    "estimate": run_estimate,
    "infer": run_infer,
    "simulate": run_simulate,
    "coverage": run_coverage,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and return its exit code"""
    try:
        config = parse_config(argv)
        configure_logging(config.log_level)
        with tracer.start_as_current_span(f"fewtreat.cli.{config.command}") as span:
            span.set_attribute("fewtreat.scheme", config.scheme)
            span.set_attribute("fewtreat.hetero", config.hetero)
            return RUNNERS[config.command](config)
    except Exception as e:
        return handle_exception(e)


def main() -> None:
    sys.exit(run())
