import logging

import pytest
from opentelemetry.sdk._logs import LoggingHandler
from opentelemetry.sdk._logs.export import InMemoryLogExporter
from opentelemetry.sdk.metrics.export import InMemoryMetricReader
from opentelemetry.sdk.resources import DEPLOYMENT_ENVIRONMENT, SERVICE_NAME
from opentelemetry.sdk.trace.export.in_memory_span_exporter import InMemorySpanExporter

from fewtreat import cli, constants


@pytest.fixture
def providers(monkeypatch):
    monkeypatch.setenv("OTEL_SERVICE_NAME", "fewtreat-test")
    monkeypatch.setenv("OTEL_DEPLOYMENT_ENVIRONMENT", "Staging")
    spans = InMemorySpanExporter()
    reader = InMemoryMetricReader()
    logs = InMemoryLogExporter()
    built = constants.build_otel_providers(
        constants.otel_resource(), spans, reader, logs
    )
    yield built, spans, reader, logs
    built.traces.shutdown()
    built.metrics.shutdown()
    built.logs.shutdown()


def test_spans_carry_the_resource(providers):
    built, spans, _, _ = providers

    with built.traces.get_tracer(__name__).start_as_current_span("fewtreat.test"):
        pass
    built.traces.force_flush()

    finished = spans.get_finished_spans()
    assert [span.name for span in finished] == ["fewtreat.test"]
    assert finished[0].resource.attributes[SERVICE_NAME] == "fewtreat-test"
    assert finished[0].resource.attributes[DEPLOYMENT_ENVIRONMENT] == "Staging"


def test_counters_reach_the_reader(providers):
    built, _, reader, _ = providers

    counter = built.metrics.get_meter(__name__).create_counter("fewtreat.resample.draws")
    counter.add(5)
    counter.add(7)

    metric = reader.get_metrics_data().resource_metrics[0].scope_metrics[0].metrics[0]
    assert metric.name == "fewtreat.resample.draws"
    assert metric.data.data_points[0].value == 12


def test_log_records_are_exported(providers):
    built, _, _, logs = providers
    logger = logging.getLogger("fewtreat.tests.otel")
    handler = LoggingHandler(level=logging.NOTSET, logger_provider=built.logs)
    logger.addHandler(handler)

    try:
        logger.warning("Exported", extra={"scheme": "att"})
        built.logs.force_flush()
    finally:
        logger.removeHandler(handler)

    assert len(logs.get_finished_logs()) == 1


def test_logging_setup_starts_otel_once(monkeypatch):
    calls = []
    monkeypatch.setattr(constants, "ENFORCE_OTEL", True)
    monkeypatch.setattr(constants, "configure_otel", lambda: calls.append(1))
    cli._start_otel.cache_clear()

    try:
        cli.configure_logging()
        cli.configure_logging()
    finally:
        cli._start_otel.cache_clear()

    assert calls == [1]
