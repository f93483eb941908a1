import json
import threading
import time

import pytest

from conftest import needs_cpus
from ucrdma.metrics import CounterSet, CpuMeter, compute_efficiency, gbps, sample_cpu, write_csv, write_jsonl


def test_efficiency_of_reference_figures():
    r = compute_efficiency(38.79, 13.64)
    assert r.efficiency == pytest.approx(2.844, abs=1e-3)
    assert r.resource_kind == "watts"


def test_efficiency_zero_bandwidth():
    assert compute_efficiency(0, 5).efficiency == 0


@pytest.mark.parametrize("resource", [0, -1])
def test_efficiency_rejects_nonpositive_resource(resource):
    with pytest.raises(ValueError):
        compute_efficiency(10, resource)


def test_efficiency_is_ratio():
    r = compute_efficiency(3.0, 0.5, "cpu_seconds_per_second")
    assert r.efficiency == r.bandwidth_gbps / r.resource == 6.0


def _spin(stop):
    while not stop.is_set():
        pass


def _spinning(threads, interval=1.0):
    stop = threading.Event()
    ts = [threading.Thread(target=_spin, args=(stop,)) for _ in range(threads)]
    for t in ts:
        t.start()
    try:
        time.sleep(0.05)
        return sample_cpu(interval)
    finally:
        stop.set()
        for t in ts:
            t.join()


def test_idle_process_uses_no_cpu():
    assert sample_cpu(0.3) < 0.05


def test_one_spinning_thread():
    assert _spinning(1) == pytest.approx(1.0, abs=0.05)


@needs_cpus(2)
def test_two_spinning_threads():
    assert _spinning(2) == pytest.approx(2.0, abs=0.1)


def test_sample_cpu_rejects_bad_interval():
    with pytest.raises(ValueError):
        sample_cpu(0)


def test_cpu_meter_counts_system_time():
    meter = CpuMeter()
    t0 = time.perf_counter()
    with open("/dev/zero", "rb") as fh:
        while time.perf_counter() - t0 < 0.3:
            fh.read(1 << 16)
    assert meter.read() > 0.5


def test_counter_bump_and_snapshot():
    c = CounterSet()
    c.bump("datagrams_rx", 3)
    c.bump("malformed_too_short")
    snap = c.snapshot()
    assert snap["datagrams_rx"] == 3 and snap["malformed_too_short"] == 1
    assert "extra" not in snap


def test_gbps():
    assert gbps(125_000_000, 1.0) == 1.0
    assert gbps(1, 0) == 0.0


def test_report_writers(tmp_path):
    rec = compute_efficiency(1.0, 2.0).to_dict()
    write_jsonl(tmp_path / "r.jsonl", rec)
    write_jsonl(tmp_path / "r.jsonl", rec)
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == [rec, rec]
    write_csv(tmp_path / "r.csv", [rec, rec])
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(rec)
