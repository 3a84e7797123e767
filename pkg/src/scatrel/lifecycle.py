import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

LOG_FORMAT = "[%(asctime)s] %(levelname)s - %(message)s"

logger = logging.getLogger("scatrel")


def configure_logging(level: str = "INFO") -> None:
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ValueError(f"unknown log level '{level}'")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)


@dataclass(frozen=True)
class RunContext:
    """Per-invocation settings shared by the subcommand handlers."""

    out_dir: Path
    config_hash: str
    threads: int = 1
    plot: bool = False
    quick: bool = False
    base_dir: Optional[Path] = None
    seed: int = 0

    def path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name


@contextmanager
def timed(label: str) -> Iterator[dict]:
    record = {"label": label, "seconds": 0.0}
    start = time.monotonic()
    logger.info(f"{label}: started")
    try:
        yield record
    finally:
        record["seconds"] = time.monotonic() - start
        logger.info(f"{label}: finished in {record['seconds']:.2f}s")
