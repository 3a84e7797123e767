"""
Compatibility wrapper for the acceptance suite.

This delegates to `scatrel.cli` so all logic lives under `src/`.
Usage:
    python scripts/run_verify.py --config configs/default.json --out out/verify [--quick]
"""

from __future__ import annotations

import sys
from pathlib import Path

# Ensure `src` is on sys.path
ROOT_DIR = Path(__file__).resolve().parent.parent
SRC_DIR = ROOT_DIR / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from scatrel.cli import main  # noqa: E402


if __name__ == "__main__":
    sys.exit(main(["verify", *sys.argv[1:]]))
