"""Shared fixtures: the golden 1k-line corpus, sidecar scorers over it,
and stub subprocess scorer scripts."""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixture_gen import build_fixture  # noqa: E402

from forge.records import read_records  # noqa: E402
from forge.scorers import SidecarScorer  # noqa: E402


@pytest.fixture(scope="session")
def fixture_bundle():
    return build_fixture()


@pytest.fixture(scope="session")
def fixture_paths(fixture_bundle, tmp_path_factory):
    root = tmp_path_factory.mktemp("fixture")
    paths = {
        "input": root / "corpus.jsonl",
        "langid": root / "langid.tsv",
        "quality": root / "quality.tsv",
        "dev": root / "dev_scores.tsv",
        "dev_records": root / "dev.jsonl",
    }
    paths["input"].write_text("".join(fixture_bundle.lines), encoding="utf-8")
    paths["langid"].write_text(fixture_bundle.langid_sidecar, encoding="utf-8")
    paths["quality"].write_text(fixture_bundle.quality_sidecar, encoding="utf-8")
    paths["dev"].write_text(fixture_bundle.dev_sidecar, encoding="utf-8")
    paths["dev_records"].write_text("".join(fixture_bundle.dev_lines), encoding="utf-8")
    return paths


@pytest.fixture
def make_fixture_scorers(fixture_paths):
    def factory():
        return {
            "langid": SidecarScorer(fixture_paths["langid"]),
            "quality": SidecarScorer(fixture_paths["quality"]),
            "dev": SidecarScorer(fixture_paths["dev"]),
            "dev_records": list(read_records(
                fixture_paths["dev_records"].read_text(encoding="utf-8").splitlines(True))),
        }
    return factory


@pytest.fixture
def fixture_scorers(make_fixture_scorers):
    return make_fixture_scorers()


STUB_SCORER_SCRIPT = '''\
import json
import sys

# Line-protocol scorer that replays a sidecar file. Optional second arg
# "reverse:N" buffers N requests and answers them in reverse order.
table = {}
with open(sys.argv[1], "r", encoding="utf-8") as f:
    for line in f:
        line = line.rstrip("\\n")
        if not line:
            continue
        fields = line.split("\\t")
        table[int(fields[0])] = fields[1:]

buffer_size = 1
if len(sys.argv) > 2 and sys.argv[2].startswith("reverse:"):
    buffer_size = int(sys.argv[2].split(":")[1])

def respond(req):
    fields = table[req["id"]]
    if len(fields) == 1:
        out = {"id": req["id"], "loss": float(fields[0])}
    else:
        out = {"id": req["id"], "lang": fields[0], "prob": float(fields[1])}
    sys.stdout.write(json.dumps(out) + "\\n")

pending = []
for line in sys.stdin:
    line = line.strip()
    if not line:
        continue
    pending.append(json.loads(line))
    if len(pending) >= buffer_size:
        for req in reversed(pending):
            respond(req)
        sys.stdout.flush()
        pending = []
for req in reversed(pending):
    respond(req)
sys.stdout.flush()
'''


@pytest.fixture(scope="session")
def stub_scorer_script(tmp_path_factory):
    path = tmp_path_factory.mktemp("stubs") / "replay_scorer.py"
    path.write_text(STUB_SCORER_SCRIPT, encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion at the end of the run

_ACCEPTANCE_OUTCOMES: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    _ACCEPTANCE_OUTCOMES.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_OUTCOMES:
        return
    try:
        from test_acceptance import CRITERIA
    except ImportError:
        CRITERIA = {}
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, outcome in _ACCEPTANCE_OUTCOMES:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {CRITERIA.get(name, name)}")
