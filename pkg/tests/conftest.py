import hypothesis
import pytest
import torch

from rsrnet.core import ModelConfig

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


@pytest.fixture
def tiny_config():
    """A 32x32 model with 3 iterations; fast enough for many forward passes."""
    return ModelConfig(
        input_size=32, stem_channels=8, encoder_channels=[8, 12, 16], feature_dim=8,
        gru_hidden_dim=12, sim_branch_channels=4, mask_branch_channels=4,
        upsample_hidden_dim=16, num_iterations=3, batch_size=2, epochs=2,
    )


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Append one "criterion N: PASS|FAIL|INFO ..." line; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(n, status, detail):
        if isinstance(status, bool):
            status = "PASS" if status else "FAIL"
        line = f"criterion {n}: {status}  {detail}"
        lines.append(line)
        print(line)
        return status != "FAIL"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
