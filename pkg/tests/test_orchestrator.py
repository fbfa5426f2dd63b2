import json
import os
import sys
import time
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import pytest

from modac.orchestrator import Job, MetricCollector, SweepOrchestrator


def _square(x, delay=0.0):
    time.sleep(delay)
    return {"v": x * x}


def test_orchestrator_collects_metrics(tmp_path):
    report = tmp_path / "report.json"
    orchestrator = SweepOrchestrator(report_file=str(report))
    metrics = orchestrator.run([Job("one", _square, {"x": 1})])
    assert metrics == [{"v": 1}]
    data = json.loads(report.read_text())
    assert data == [{"job": "one", "v": 1}]
    assert orchestrator.report_path == report


def test_thread_backend_keeps_job_order(tmp_path):
    jobs = [Job(f"j{i}", _square, {"x": i, "delay": 0.05 * (3 - i)}) for i in range(4)]
    orchestrator = SweepOrchestrator("thread", str(tmp_path / "report.json"), max_workers=4)
    assert orchestrator.run(jobs) == [{"v": i * i} for i in range(4)]
    assert len(orchestrator.collector.get_metrics()) == 4


def test_empty_job_list():
    assert SweepOrchestrator().run([]) == []


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        SweepOrchestrator("slurm")


def test_ray_backend_requires_ray(mocker):
    mocker.patch("modac.orchestrator.ray", None)
    with pytest.raises(ImportError):
        SweepOrchestrator("ray")


def test_collector_without_report_file():
    collector = MetricCollector()
    collector.add_metric({"a": 1})
    assert collector.get_metrics() == [{"a": 1}]
