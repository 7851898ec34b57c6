import logging

import pytest
import torch

from ccrseq.datagen import GenerationConfig, build_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A small cross-domain corpus shared by the training tests."""
    out = tmp_path_factory.mktemp("corpus")
    build_corpus(GenerationConfig(labeled=96, unlabeled=96, test_clean=24, test_perturbed=24, seed=3), out)
    return out


@pytest.fixture(scope="session")
def tiny_in_domain_corpus(tmp_path_factory):
    from ccrseq.datagen import Domain

    out = tmp_path_factory.mktemp("corpus_in")
    build_corpus(GenerationConfig(labeled=64, unlabeled=64, test_clean=16, test_perturbed=16, seed=4,
                                  labeled_domain=Domain.PERTURBED), out)
    return out


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


# one PASS/FAIL line per acceptance criterion at the end of the run
_criteria: dict[str, dict] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when != "call" and report.passed:
        return
    name = report.nodeid.split("::")[1].split("[")[0]
    entry = _criteria.setdefault(name, {"passed": True, "detail": ""})
    entry["passed"] = entry["passed"] and report.passed
    lines = [ln for ln in report.capstdout.splitlines() if ln.strip()]
    if lines:
        entry["detail"] = lines[-1]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        parts = name.split("_")
        entry = _criteria[name]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {int(parts[2]):2d} {' '.join(parts[3:])}: {status}")
        if entry["detail"]:
            terminalreporter.write_line(f"    {entry['detail']}")
