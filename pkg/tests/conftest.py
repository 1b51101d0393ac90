import pytest

from mmembed.synth import SynthSpec, generate_corpus

SMALL_SPEC = SynthSpec(n_text=40, n_caption=80, n_longform=30, seed=0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(SMALL_SPEC, out)
    return out


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
