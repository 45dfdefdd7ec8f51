import pytest

from icrm import ann, experiment


@pytest.fixture(scope="session")
def synthetic_model() -> ann.Network:
    """A small classifier trained on synthetic rhythms, shared across modules."""
    data = experiment.synthetic_dataset(n_per_class=30, duration_s=120.0)
    cfg = ann.NetConfig(learning_rate=0.01, patience=20, seed=42)
    return experiment.run_experiment(data, cfg).network


@pytest.fixture(scope="session")
def model_file(synthetic_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.icrm"
    path.write_bytes(ann.save_network(synthetic_model))
    return path


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def acceptance_lines(request) -> list:
    return request.config.stash[ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
