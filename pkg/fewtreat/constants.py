import dataclasses
import logging
import os
from typing import Literal, cast

from commons import value_to_bool
from dotenv import load_dotenv
from opentelemetry import trace, metrics
from opentelemetry._logs import set_logger_provider
from opentelemetry.exporter.otlp.proto.http._log_exporter import OTLPLogExporter
from opentelemetry.exporter.otlp.proto.http.metric_exporter import OTLPMetricExporter
from opentelemetry.exporter.otlp.proto.http.trace_exporter import OTLPSpanExporter
from opentelemetry.sdk._logs import LoggerProvider, LoggingHandler
from opentelemetry.sdk._logs.export import BatchLogRecordProcessor, LogExporter
from opentelemetry.sdk.metrics import MeterProvider
from opentelemetry.sdk.metrics.export import MetricReader, PeriodicExportingMetricReader
from opentelemetry.sdk.resources import (
    SERVICE_NAME,
    Resource,
    DEPLOYMENT_ENVIRONMENT,
    HOST_NAME,
)
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor, SpanExporter

load_dotenv()


def otel_resource() -> Resource:
    deployment_environment: Literal["Production", "Development", "Staging"] = cast(
        Literal["Production", "Development", "Staging"],
        os.environ.get("OTEL_DEPLOYMENT_ENVIRONMENT", "Development"),
    )
    return Resource.create(
        attributes={
            SERVICE_NAME: os.environ.get("OTEL_SERVICE_NAME", "fewtreat"),
            DEPLOYMENT_ENVIRONMENT: deployment_environment,
            HOST_NAME: os.environ.get("OTEL_HOST", "localhost"),
        }
    )


@dataclasses.dataclass(frozen=True)
class OtelProviders:
    traces: TracerProvider
    metrics: MeterProvider
    logs: LoggerProvider


def build_otel_providers(
    resource: Resource,
    span_exporter: SpanExporter,
    metric_reader: MetricReader,
    log_exporter: LogExporter,
) -> OtelProviders:
    trace_provider = TracerProvider(resource=resource)
    trace_provider.add_span_processor(BatchSpanProcessor(span_exporter))

    meter_provider = MeterProvider(resource=resource, metric_readers=[metric_reader])

    logger_provider = LoggerProvider(resource=resource)
    logger_provider.add_log_record_processor(BatchLogRecordProcessor(log_exporter))
    return OtelProviders(traces=trace_provider, metrics=meter_provider, logs=logger_provider)


def configure_otel() -> OtelProviders:
    """Export traces, metrics and logs to ``OTEL_ENDPOINT`` and make them global"""
    endpoint = os.environ["OTEL_ENDPOINT"]
    bearer_token = os.environ.get("OTEL_BEARER")
    headers = {"Authorization": f"Bearer {bearer_token}"} if bearer_token else {}

    providers = build_otel_providers(
        otel_resource(),
        OTLPSpanExporter(endpoint=f"{endpoint}/v1/traces", headers=headers),
        PeriodicExportingMetricReader(
            OTLPMetricExporter(endpoint=f"{endpoint}/v1/metrics", headers=headers)
        ),
        OTLPLogExporter(endpoint=f"{endpoint}/v1/logs", headers=headers),
    )
    trace.set_tracer_provider(providers.traces)
    metrics.set_meter_provider(providers.metrics)
    set_logger_provider(providers.logs)

    # Attach OTel handler to Python's root logger
    handler = LoggingHandler(level=logging.NOTSET, logger_provider=providers.logs)
    logging.getLogger().addHandler(handler)
    return providers


DEBUG: bool = value_to_bool(os.environ.get("DEBUG"))
"""Log at DEBUG and print tracebacks for CLI failures."""

ENFORCE_OTEL: bool = value_to_bool(os.environ.get("ENFORCE_OTEL"))
"""Export traces, metrics and logs over OTLP."""

THREADS: int = max(1, int(os.environ.get("FEWTREAT_THREADS", os.cpu_count() or 1)))
"""Upper bound on worker threads used by any parallel stage."""

LOG_CONFIG_PATH: str = os.environ.get(
    "FEWTREAT_LOG_CONFIG",
    os.path.join(os.path.dirname(os.path.dirname(__file__)), "log_conf.yaml"),
)
"""A YAML dictConfig file for the standard logging module."""

DEFAULT_DRAWS: int = 10_000
"""Resample draws used by ``infer`` when B is not given."""

DEFAULT_COVERAGE_DRAWS: int = 2_000
"""Resample draws per replication used by ``coverage`` when B is not given."""

DEFAULT_REPLICATIONS: int = 2_000
"""Monte Carlo replications used by ``coverage``."""

DEFAULT_ALPHA: float = 0.05

MIN_REPLICATIONS: int = 100
"""Coverage experiments below this are too noisy to report."""

EXACT_ENUMERATION_LIMIT: int = 10**8
"""Largest N0 ** N1 that ``exact_cdf`` will enumerate."""

ENUMERATION_CHUNK: int = 1_000_000
"""Index tuples evaluated per chunk during exact enumeration."""

DRAW_BLOCK_SIZE: int = 4_096
"""Draws per random substream.

Changing this changes every seeded draw matrix, so it is fixed here
rather than exposed as an option.
"""

ROW_SUM_TOLERANCE: float = 1e-10
"""Maximum absolute row sum of B_j A_j accepted as zero."""

DEGENERATE_TOLERANCE: float = 1e-12
"""Rows of B_j A_j with every entry at or below this are degenerate."""

WEIGHT_SUM_TOLERANCE: float = 1e-10
"""Pre-period weights must sum to one within this."""

PSD_TOLERANCE: float = 1e-10
"""Smallest eigenvalue accepted for a PSD input matrix."""

DEFAULT_SV_FLOOR_SCALE: float = 1e-6
"""Default singular value floor relative to the median pooled singular value."""

ABSOLUTE_SV_FLOOR: float = 1e-6
"""Floor used when every control residual is zero."""
