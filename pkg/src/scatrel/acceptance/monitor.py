from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass

import numpy as np
import psutil


@dataclass(frozen=True)
class Usage:
    seconds: float
    cpu_avg: float
    ram_peak_mb: float

    def to_dict(self) -> dict:
        return {"seconds": self.seconds, "cpu_avg": self.cpu_avg, "ram_peak_mb": self.ram_peak_mb}


class ResourceMonitor:
    """Samples cpu and resident memory of this process on a background thread while a check runs."""

    def __init__(self, interval: float = 0.2):
        self.interval = interval
        self.process = psutil.Process(os.getpid())
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.cpu_samples: list[float] = []
        self.ram_samples: list[float] = []
        self.start_time = 0.0

    def _sample(self) -> None:
        while not self._stop.is_set():
            self.cpu_samples.append(self.process.cpu_percent(interval=None))
            self.ram_samples.append(self.process.memory_info().rss / (1024 * 1024))
            self._stop.wait(self.interval)

    def start(self) -> None:
        self.cpu_samples, self.ram_samples = [], []
        self._stop.clear()
        self.start_time = time.monotonic()
        self.process.cpu_percent(interval=None)
        self._thread = threading.Thread(target=self._sample, daemon=True)
        self._thread.start()

    def stop(self) -> Usage:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        seconds = time.monotonic() - self.start_time
        cpu = float(np.mean(self.cpu_samples)) if self.cpu_samples else 0.0
        ram = float(np.max(self.ram_samples)) if self.ram_samples else 0.0
        return Usage(seconds, cpu, ram)

    def __enter__(self) -> "ResourceMonitor":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.usage = self.stop()
