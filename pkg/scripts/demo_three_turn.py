"""Run the staged pipeline against the bundled sedan script and print the transcript.

Usage:
    python scripts/demo_three_turn.py [--mode main_question|describe_summarize]
"""

from __future__ import annotations

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from selfask.gateway import BackendProfile, Gateway
from selfask.mockllm import MockBackend, mock_transport
from selfask.pipeline import PipelineOptions, run_three_turn

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument(
        "--mode", choices=["main_question", "describe_summarize"], default="main_question"
    )
    args = parser.parse_args()

    script = (
        "script_sedan_three_turn.json"
        if args.mode == "main_question"
        else "script_sedan_describe.json"
    )
    mock = MockBackend.load(os.path.join(FIXTURES, script))
    profile = BackendProfile(backend_id="mock", endpoint="mock:", model="scripted-1")
    gateway = Gateway({"mock": profile}, transports={"mock": mock_transport(mock)})

    options = PipelineOptions(
        mode="three_turn_main_question"
        if args.mode == "main_question"
        else "three_turn_describe_summarize"
    )
    result = run_three_turn(gateway, "mock", "images/sedan-0001.jpg", options=options)

    for i, turn in enumerate(result.transcript.turns, 1):
        print(f"--- turn {i} [{turn.kind}] ---")
        print(f"user: {turn.human_text}")
        print(f"assistant: {turn.assistant_text}")
        print()
    print(f"questions asked: {len(result.questions)}")
    print(f"final answer: {result.final_answer[:100]}...")


if __name__ == "__main__":
    main()
