# -*- coding: utf-8 -*-
"""
Runs independent sweep jobs on a local or a ray backend and collects their
summary rows.

Jobs are plain callables with keyword arguments.  Results come back in job
order whatever the completion order, and every collected row is appended to
an optional JSON report as it arrives.
"""
from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from modac.utils import get_logger

try:
    import ray
except ImportError:
    ray = None

logger = get_logger("modac.orchestrator")

BACKENDS = ("serial", "thread", "ray")


@dataclass
class Job:
    key: str
    func: Callable[..., Dict[str, Any]]
    kwargs: Dict[str, Any] = field(default_factory=dict)


class MetricCollector:
    """Keeps collected rows and mirrors them into ``report_file``."""

    def __init__(self, report_file: Optional[str] = None):
        self.metrics: List[Dict[str, Any]] = []
        self.report_file = report_file

    def add_metric(self, metric: Dict[str, Any]) -> None:
        self.metrics.append(metric)
        if self.report_file:
            with open(self.report_file, "w", encoding="utf-8") as f:
                json.dump(self.metrics, f, indent=2, default=str)

    def get_metrics(self) -> List[Dict[str, Any]]:
        return list(self.metrics)


if ray:
    @ray.remote
    def _run_remote(func: Callable[..., Dict[str, Any]], kwargs: Dict[str, Any]) -> Dict[str, Any]:
        return func(**kwargs)


class SweepOrchestrator:
    """Dispatches jobs; ``max_workers`` bounds concurrency on the thread backend."""

    def __init__(self, backend: str = "serial", report_file: Optional[str] = None, max_workers: int = 4) -> None:
        if backend not in BACKENDS:
            raise ValueError(f"Backend must be one of {BACKENDS}")
        if backend == "ray" and not ray:
            raise ImportError("Ray backend selected but ray is not installed.")
        self.backend = backend
        self.max_workers = max(1, max_workers)
        self.collector = MetricCollector(report_file)

    async def _run_job(self, job: Job, limiter: asyncio.Semaphore) -> Dict[str, Any]:
        async with limiter:
            logger.info("job %s started (%s backend)", job.key, self.backend)
            if self.backend == "ray":
                result = await _run_remote.remote(job.func, job.kwargs)
            else:
                result = await asyncio.to_thread(job.func, **job.kwargs)
            self.collector.add_metric({"job": job.key, **result})
            logger.info("job %s finished", job.key)
            return result

    async def _run_all(self, jobs: List[Job]) -> List[Dict[str, Any]]:
        limiter = asyncio.Semaphore(self.max_workers if self.backend != "serial" else 1)
        return list(await asyncio.gather(*[self._run_job(job, limiter) for job in jobs]))

    def run(self, jobs: List[Job]) -> List[Dict[str, Any]]:
        if not jobs:
            return []
        if self.backend == "serial":
            results = []
            for job in jobs:
                logger.info("job %s started (serial backend)", job.key)
                result = job.func(**job.kwargs)
                self.collector.add_metric({"job": job.key, **result})
                results.append(result)
            return results
        if self.backend == "ray" and not ray.is_initialized():
            ray.init(ignore_reinit_error=True, log_to_driver=False)
        try:
            return asyncio.run(self._run_all(jobs))
        finally:
            if self.backend == "ray":
                ray.shutdown()

    @property
    def report_path(self) -> Optional[Path]:
        return Path(self.collector.report_file) if self.collector.report_file else None
