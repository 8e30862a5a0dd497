import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dense_gp(X, y, X_star, ell, kvar, nvar):
    """Textbook dense GP posterior written out with explicit inverses."""
    X = np.atleast_2d(np.asarray(X, float).T).T if np.ndim(X) == 1 else np.asarray(X, float)
    X_star = np.atleast_2d(np.asarray(X_star, float).T).T if np.ndim(X_star) == 1 \
        else np.asarray(X_star, float)

    def k(A, B):
        sq = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
        return kvar * np.exp(-0.5 * sq / ell ** 2)

    Kinv = np.linalg.inv(k(X, X) + nvar * np.eye(len(X)))
    Ks = k(X_star, X)
    mean = Ks @ Kinv @ y
    var = np.diag(k(X_star, X_star) - Ks @ Kinv @ Ks.T)
    return mean, var, Ks @ Kinv


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
