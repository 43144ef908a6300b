import numpy as np
import pytest

from mrcorr import CorrelationMatrix, IndividualData, SummarySet
from mrcorr.simulation import chain_haplotypes, simulate_genotypes


def random_corr(rng, J, strength=1.0):
    """Random positive-definite correlation matrix."""
    A = rng.normal(size=(J, J + 2)) * strength
    A[:, :1] += rng.normal(size=(J, 1)) * strength
    S = A @ A.T + np.eye(J) * 0.05
    d = np.sqrt(np.diag(S))
    return S / np.outer(d, d)


def make_summary(rng, J, ids=None, maf=False, n=None):
    ids = ids or [f"v{j + 1}" for j in range(J)]
    bx = rng.normal(0.2, 0.1, J)
    kw = {}
    if maf:
        kw["maf"] = rng.uniform(0.05, 0.5, J)
    if n is not None:
        kw["n_x"] = np.full(J, float(n))
    return SummarySet(ids, ["A"] * J, ["G"] * J, bx, rng.uniform(0.01, 0.05, J),
                      0.3 * bx + rng.normal(0, 0.03, J), rng.uniform(0.02, 0.1, J), **kw)


def make_pair(rng, J):
    s = make_summary(rng, J)
    return s, CorrelationMatrix(s.ids, random_corr(rng, J))


def individual_data(rng, N, J, correlated, theta=0.2):
    """Genotypes (independent binomial or haplotype-based), confounded X and Y."""
    for _ in range(50):
        if correlated:
            H = chain_haplotypes(J, 2 * J + 2, 0.25, rng)
            f = rng.dirichlet(np.full(2 * J + 2, 3.0))
            G = simulate_genotypes(N, list(zip(H, f)), rng).astype(float)
        else:
            G = rng.binomial(2, rng.uniform(0.1, 0.5, J), size=(N, J)).astype(float)
        Gc = G - G.mean(axis=0)
        if np.ptp(G, axis=0).min() > 0 and np.linalg.matrix_rank(Gc) == J:
            break
    else:
        raise RuntimeError("could not draw a full-rank genotype matrix")
    u = rng.normal(size=N)
    x = G @ rng.normal(0.3, 0.1, J) + u + rng.normal(size=N)
    y = theta * x + u + rng.normal(size=N)
    return IndividualData(G, x, y)


def orthogonal_genotypes(J, reps):
    """Full-factorial {0, 2} design: centred columns exactly orthogonal."""
    grid = np.array(np.meshgrid(*[[0.0, 2.0]] * J, indexing="ij")).reshape(J, -1).T
    return np.tile(grid, (reps, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
