import pytest

from loraserve.kernels import AdapterBatch
from loraserve.perf_model import ProfilePoint, fit
from loraserve.scheduler import RouteRequest, SchedulerConfig, ServerSnapshot

# Two-instance routing case: instance 1 runs 24 rank-32 requests, instance 2
# runs 16 rank-64 requests; measured decode latencies per kernel below.
INST1 = AdapterBatch((32,) * 24)
INST2 = AdapterBatch((64,) * 16)
MEASURED = {"bgmv": (34.8, 35.8), "mbgmv": (35.3, 35.9)}
SLO_MS = 36.0


def two_instance_model(kind):
    l1, l2 = MEASURED[kind]
    return fit([ProfilePoint.from_batch(INST1, l1), ProfilePoint.from_batch(INST2, l2)], kind)


def two_instance_snapshots():
    return [ServerSnapshot(1, INST1), ServerSnapshot(2, INST2)]


def two_instance_config(kind, model=None, **kw):
    model = model or two_instance_model(kind)
    return SchedulerConfig(decode_model=model, prefill_model=model, slo_ms=SLO_MS, **kw)


NEW_REQ = RouteRequest(id=0, adapter_id="new", rank=64, prompt_len=16)


@pytest.fixture
def new_request():
    return NEW_REQ


# -- acceptance reporting ------------------------------------------------------------
# Each acceptance test records one line; the lines are repeated in the terminal
# summary so they survive output capture.

ACCEPTANCE_LINES = {}


def record_acceptance(number, ok, text):
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {text}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
