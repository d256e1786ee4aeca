import pytest
import torch

from mprotonet.network import BackboneConfig
from mprotonet.trainer import TrainSchedule
from mprotonet.volume_io import CaseStore, synthesize_dataset

SMALL_SHAPE = (32, 32, 24)


def small_backbone(**kw):
    base = dict(input_shape=SMALL_SHAPE, stem_channels=4, widths=(4, 8), embedding_channels=8, prototypes_per_class=3)
    base.update(kw)
    return BackboneConfig.toy(**base)


def small_schedule(**kw):
    base = dict(stage1_epochs=2, warmup_epochs=1, cosine_epochs=1, batch_size=4, cycle_period=1, stage3_epochs=2,
                augment=False)
    base.update(kw)
    return TrainSchedule(**base)


@pytest.fixture
def small_store(tmp_path):
    man = synthesize_dataset(12, 0.5, 3)
    return CaseStore(man, tmp_path / "cache", shape=SMALL_SHAPE)


@pytest.fixture(autouse=True)
def _restore_determinism_flag():
    flag = torch.are_deterministic_algorithms_enabled()
    yield
    torch.use_deterministic_algorithms(flag)


# -- acceptance reporting -----------------------------------------------------------

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one pass/fail line for the summary."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
