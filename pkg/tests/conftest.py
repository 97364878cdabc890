"""Shared fixtures: golden files, scripted gateways."""

from __future__ import annotations

import os

import pytest

from selfask.conversation import parse_sample_record
from selfask.gateway import BackendProfile, Gateway
from selfask.mockllm import MockBackend, mock_transport

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(name: str) -> str:
    return os.path.join(FIXTURES, name)


def read_fixture(name: str) -> str:
    with open(fixture_path(name), encoding="utf-8") as fh:
        return fh.read()


@pytest.fixture
def nightcar_line() -> str:
    return read_fixture("conversation_nightcar.jsonl").strip()


@pytest.fixture
def nightcar_sample(nightcar_line):
    return parse_sample_record(nightcar_line)


def scripted_gateway(
    script_name_or_entries,
    backend_id: str = "mock",
    retry_budget: int = 1,
    max_in_flight: int = 4,
) -> tuple[Gateway, MockBackend]:
    """Gateway wired to an in-process scripted backend."""
    if isinstance(script_name_or_entries, str):
        mock = MockBackend.load(fixture_path(script_name_or_entries))
    else:
        mock = MockBackend.from_script(script_name_or_entries)
    profile = BackendProfile(
        backend_id=backend_id,
        endpoint="mock:",
        model="scripted-1",
        retry_budget=retry_budget,
        max_in_flight=max_in_flight,
        backoff_base=0.001,
    )
    gateway = Gateway(
        {backend_id: profile}, transports={backend_id: mock_transport(mock)}, sleep=lambda s: None
    )
    return gateway, mock


@pytest.fixture
def sedan_three_turn():
    return scripted_gateway("script_sedan_three_turn.json")
