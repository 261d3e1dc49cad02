import numpy as np
import pytest

from ibtl.data import blob_means, gen_blobs
from ibtl.loo import newton_fit
from ibtl.model import ArchitectureSpec, GradEngine, ParameterVector
from ibtl.numkit import RngStream


def blobs_problem(seed=0, n_train=200, n_val=40, K=3, d=5, spread=2.0, noise=1.0, lam=0.01):
    """Softmax-linear fit to its optimum on Gaussian blobs, with a validation draw from the same means."""
    rng = RngStream(seed)
    means = blob_means(K, d, spread, rng.child("m"))
    train = gen_blobs(K, n_train, d, spread, noise, rng.child("t"), means=means)
    val = gen_blobs(K, n_val, d, spread, noise, rng.child("v"), means=means, id_start=n_train)
    spec = ArchitectureSpec(d, K, l2_lambda=lam)
    theta = newton_fit(spec, train.features, train.labels)
    engine = GradEngine(spec, ParameterVector.for_spec(spec, theta))
    return spec, engine, train, val


@pytest.fixture(scope="session")
def blobs():
    return blobs_problem()


@pytest.fixture
def rng():
    return RngStream(1234)


def random_spd(rng, n, shift=1.0):
    M = rng.normal(size=(n, n))
    return M.T @ M + shift * np.eye(n)


def noisy_blobs_problem(seed=0, n_train=300, n_val=60, fraction=0.1):
    """Blobs with flipped training labels, a clean validation draw, and a model fit to the corrupted set."""
    from ibtl.data import corrupt_labels

    spec, _, clean, val = blobs_problem(seed=seed, n_train=n_train, n_val=n_val)
    train, flipped = corrupt_labels(clean, fraction, RngStream(seed).child("flip"))
    engine = GradEngine(spec, ParameterVector.for_spec(spec, newton_fit(spec, train.features, train.labels)))
    return spec, engine, train, val, flipped


# acceptance verdicts, printed as one line each at the end of the run
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
