import pytest
import torch

torch.set_num_threads(max(1, torch.get_num_threads()))

TINY_LOCATOR = "synthetic:shapes10?n_train=500&n_test=200"


@pytest.fixture
def rng_seed():
    torch.manual_seed(0)
    return 0


@pytest.fixture(scope="session")
def tiny_teacher(tmp_path_factory):
    """A small teacher trained once per session (above chance, a few seconds)."""
    from helpers import tiny_config

    from graftkd.pipeline import train_teacher

    root = tmp_path_factory.mktemp("teacher")
    cfg = tiny_config(root, teacher_dir=root / "teacher")
    path, acc = train_teacher(cfg)
    return path, acc


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    mark = dict(report.user_properties).get("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        if report.outcome != "passed" and report.longrepr is not None:
            msg = getattr(report.longrepr, "reprcrash", None)
            detail = (detail + " | " if detail else "") + (msg.message.splitlines()[0] if msg else str(report.outcome))
        _RESULTS[mark] = ("PASS" if report.outcome == "passed" else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(_RESULTS):
        status, detail = _RESULTS[c]
        terminalreporter.write_line(f"criterion {c:>2}: {status}  {detail}")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))
