import numpy as np
import pytest
from hypothesis import settings

from feast import autodiff as ad
from feast.datasets import SyntheticSpec, make_split, make_synthetic, standardize
from feast.gradcheck import numerical_grad, relative_error

settings.register_profile("feast", deadline=None, max_examples=100, derandomize=True)
settings.load_profile("feast")

GRAD_TOL = 1e-4


def check_gradient(build, arrays, h=1e-5):
    """Relative error between autodiff and central differences for ``build(*tensors) -> scalar``."""
    leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = ad.grad(build(*leaves), leaves)
    numeric = numerical_grad(lambda: build(*[ad.Tensor(a) for a in arrays]).item(), arrays, h)
    return relative_error(analytic, numeric)


@pytest.fixture(scope="session")
def small_data():
    """Standardized synthetic table (1500 rows, 8 subsets) and a 4/2/2 split."""
    raw = make_synthetic(SyntheticSpec(), 1500, 8, seed=3)
    split = make_split(raw, 4, 2, 2, seed=3)
    return standardize(raw, split.train), split


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool | None, detail: str) -> str:
    """Store (and print) the one-line verdict for an acceptance criterion; ``None`` means skipped."""
    verdict = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"criterion {number}: {verdict} - {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
