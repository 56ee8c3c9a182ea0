import numpy as np
import pytest
import torch

from ssvgan import synthdata

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled in by tests/test_acceptance.py
_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE[criterion] = (passed, detail)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory) -> synthdata.DatasetManifest:
    """150-clip dataset shared by tests that need real files on disk."""
    out = tmp_path_factory.mktemp("tinyds")
    cfg = synthdata.DataConfig(n_clips=150, seed=11)
    return synthdata.build_dataset(cfg, out)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def pytest_collection_modifyitems(config, items):
    """Run the long acceptance checks after the unit suite."""
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    executed = set()
    for key in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(key, []):
            name = getattr(report, "location", ("", 0, ""))[2]
            if "criterion_" in name:
                executed.add(int(name.split("criterion_")[1].split("_")[0]))
    if not executed and not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(executed | set(_ACCEPTANCE)):
        if criterion in _ACCEPTANCE:
            passed, detail = _ACCEPTANCE[criterion]
            status = "PASS" if passed else "FAIL"
        else:
            status, detail = "FAIL", "not recorded (the test errored before finishing)"
        terminalreporter.write_line(f"ACCEPTANCE {criterion}: {status} - {detail}")
