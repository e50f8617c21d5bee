import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def stroke_small():
    from actseq.datagen import generate, stroke_like
    return generate(stroke_like(3, length_range=(200, 300)), 8)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}")
