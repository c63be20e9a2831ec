import numpy as np
import pytest

from mldsc.model import BlockPartition, LqgProblem, paper_experiment
from mldsc.sweep import solve_mldsc, solve_mlposc


def scalar_problem(A=0.0, B=1.0, Q=1.0, R=1.0, P=0.0, sigma=1.0, T=1.0, mu0=0.0, Sigma0=1.0) -> LqgProblem:
    """Scalar LQG plant with one dormant memory coordinate.

    The memory has no dynamics, noise, cost or actuation, so the state block
    of every gain solves the scalar equation on its own.
    """
    return LqgProblem(
        partition=BlockPartition(1, (1,)),
        A=np.diag([A, 0.0]),
        B=(np.array([[B], [0.0]]),),
        sigma=np.diag([sigma, 0.0]),
        Q=np.diag([Q, 0.0]),
        R=(np.array([[R]]),),
        P=np.diag([P, 0.0]),
        mu0=np.array([mu0, 0.0]),
        Sigma0=np.diag([Sigma0, 1.0]),
        T=T,
    )


def single_controller_problem(T=2.0) -> LqgProblem:
    """One controller with a scalar memory that reads a noisy observation of x."""
    return LqgProblem(
        partition=BlockPartition(1, (1,)),
        A=np.array([[0.5, 0.0], [1.0, 0.0]]),
        B=(np.eye(2),),
        sigma=np.eye(2),
        Q=np.diag([1.0, 0.0]),
        R=(np.eye(2),),
        P=np.diag([0.5, 0.0]),
        mu0=np.array([0.3, -0.2]),
        Sigma0=np.eye(2),
        T=T,
    )


def random_psd(rng, n, rank=None):
    M = rng.standard_normal((n, rank or n))
    return M @ M.T


@pytest.fixture(scope="session")
def paper():
    return paper_experiment()


@pytest.fixture(scope="session")
def paper_dsc(paper):
    return solve_mldsc(paper)


@pytest.fixture(scope="session")
def paper_posc(paper):
    return solve_mlposc(paper)
