"""Write a self-contained toy workspace and print the commands to drive it.

Usage:
    python scripts/make_toy_workspace.py [target_dir]
"""

from __future__ import annotations

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from selfask.toydata import make_toy_workspace


def main() -> None:
    target = sys.argv[1] if len(sys.argv) > 1 else "toy_workspace"
    paths = make_toy_workspace(target)
    config = paths["config"]
    print(f"workspace written under {target}/")
    print("try:")
    print(f"  selfask --config {config} generate --corpus {paths['corpus']} "
          "--train-count 3 --test-count 2")
    print(f"  selfask --config {config} infer --testset {os.path.join(target, 'out', 'dataset.jsonl')}")
    print(f"  selfask --config {config} eval-capqa --testset {os.path.join(target, 'out', 'dataset.jsonl')} "
          f"--outputs {os.path.join(target, 'out', 'results.jsonl')} --metric hals")
    print(f"  selfask --config {config} eval-pope --annotations {paths['pope_annotations']} "
          "--setting adversarial")


if __name__ == "__main__":
    main()
