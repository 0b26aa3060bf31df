import pytest

from birads_net.lexicon import (
    DescriptorLabels,
    EchoPattern,
    Margin,
    Orientation,
    Posterior,
    Shape,
)
from birads_net.phantom import generate_dataset


@pytest.fixture
def benign_labels():
    return DescriptorLabels(
        Shape.OVAL, Orientation.PARALLEL, Margin(True), EchoPattern.ANECHOIC, Posterior.NONE
    )


@pytest.fixture
def malignant_labels():
    return DescriptorLabels(
        Shape.IRREGULAR,
        Orientation.NOT_PARALLEL,
        Margin(False, spiculated=True),
        EchoPattern.HYPOECHOIC,
        Posterior.SHADOWING,
    )


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    generate_dataset(30, seed=11, out_dir=out)
    return out


# Acceptance criteria report one line each; the summary repeats them at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
