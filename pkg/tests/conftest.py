import numpy as np
import pytest
import torch

from fruitseg.model import ArchitectureConfig, build_model

# small widths keep CPU tests fast; the wiring is identical to the default model
TINY = dict(
    branch_width=16,
    head_width=16,
    ppm_branch_width=8,
    encoder_stage_channels=(8, 16, 32, 64),
    context_planes=16,
)


def tiny_cfg(variant="three_branch", **kw):
    return ArchitectureConfig(variant=variant, **{**TINY, **kw})


@pytest.fixture
def tiny_model():
    return build_model(tiny_cfg(), seed=0)


@pytest.fixture
def tiny_two_branch():
    return build_model(tiny_cfg("two_branch"), seed=0)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion in the terminal summary

CRITERIA = {}


def report_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"CRITERION {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])
