import pytest

from auditchain.log_model import LogRecord
from auditchain.net_sim import Network, NetworkConfig
from auditchain.query_engine import EngineConfig

_CRITERIA: dict[str, tuple[bool, str]] = {}


def make_record(timestamp=1522257730000, node=3, id=12, ref_id=40345, user=7,
                activity="read", resource="TOPMed") -> LogRecord:
    return LogRecord(timestamp, node, id, ref_id, user, activity, resource)


@pytest.fixture
def small_net():
    def build(nodes=4, k=4, bucket=10, **kw):
        return Network(NetworkConfig(node_count=nodes, engine=EngineConfig(bucket, k), **kw))
    return build


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the end-of-run summary."""
    def report(name: str, ok: bool, detail: str = "") -> None:
        _CRITERIA[name] = (ok, detail)
        assert ok, f"{name}: {detail}"
    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split()[0])):
        ok, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
