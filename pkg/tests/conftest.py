import pytest
import torch

from squire.model import ModelConfig, SquireModel
from squire.synthetic import graph_from_names

F_TRAIN = [("A", "r1", "B"), ("B", "r2", "C"), ("A", "r", "C"), ("D", "r1", "B")]


def fixture_graph(valid=(), test=()):
    return graph_from_names(F_TRAIN, valid, test)


@pytest.fixture
def F():
    return fixture_graph()


@pytest.fixture
def tok(F):
    """Name -> token id on the fixture graph; relation names may carry ^-1."""
    v = F.vocab

    def lookup(name):
        if name in ("A", "B", "C", "D"):
            return v.entity_id(name)
        return v.relation_token_id(name)

    return lookup


def tiny_model(vocab_size=13, layers=2, d=8, heads=2, seed=0, dtype=torch.float64, max_hops=3):
    cfg = ModelConfig(
        vocab_size=vocab_size, layers=layers, d=d, ff_dim=2 * d, heads=heads, dropout=0.0,
        max_seq_len=2 + 2 * max_hops + 1, seed=seed,
    )
    return SquireModel(cfg).to(dtype)


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    n, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA[n] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcome = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {outcome}  {title}")
