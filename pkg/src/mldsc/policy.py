"""Feedback laws built from solved gain and moment trajectories.

Every law has the form ``u_i = -R_ii^{-1} B_i' (G K s_hat + Psi mu)`` with
``s_hat`` the deviation of the controller's information from the mean,
embedded in the extended state with zeros elsewhere. Kinds differ in the
gain ``G`` and in the conditional-mean gain ``K``:

=========  ==========  =========================  =====================
kind       ``G``       ``K``                      information
=========  ==========  =========================  =====================
mldsc      ``Phi``     per-controller ``K_i``     own memory ``z^i``
psi        ``Psi``     per-controller ``K_i``     own memory ``z^i``
pi         ``Pi``      per-controller ``K_i``     own memory ``z^i``
cosc       ``Psi``     identity                   full extended state
mlposc     ``Pi``      joint ``K``                joint memory
=========  ==========  =========================  =====================
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError
from .model import LqgProblem
from .moments import GainRule, MomentTrajectory, gain_from_indices, gains_from_indices, propagate_covariance
from .numerics import MatrixTrajectory, sample_at, sample_many


class PolicyKind(str, Enum):
    MLDSC_OPT = "mldsc"
    PSI_SWAP = "psi"
    PI_SWAP = "pi"
    COSC = "cosc"
    MLPOSC = "mlposc"


RULES = {
    PolicyKind.MLDSC_OPT: GainRule.PER_CONTROLLER,
    PolicyKind.PSI_SWAP: GainRule.PER_CONTROLLER,
    PolicyKind.PI_SWAP: GainRule.PER_CONTROLLER,
    PolicyKind.COSC: GainRule.IDENTITY,
    PolicyKind.MLPOSC: GainRule.JOINT,
}


@dataclass(frozen=True, eq=False)
class Policy:
    """Immutable feedback law.

    ``moments.Sigma`` is the covariance the conditional-mean gains are built
    from; ``moments.mu`` is the mean used for the deviation and the
    feedthrough.
    """

    kind: PolicyKind
    problem: LqgProblem
    psi: MatrixTrajectory
    gain: MatrixTrajectory
    moments: MomentTrajectory

    @property
    def gain_rule(self) -> GainRule:
        return RULES[self.kind]

    @property
    def grid(self):
        return self.psi.grid

    def information_set(self, i: int) -> np.ndarray:
        """Extended-state coordinates controller ``i`` reads."""
        part = self.problem.partition
        if not 0 <= i < part.N:
            raise ContractError(f"controller index {i} out of range for N={part.N}")
        rule = self.gain_rule
        if rule is GainRule.PER_CONTROLLER:
            return part.z_indices(i)
        if rule is GainRule.JOINT:
            return part.memory_indices()
        return np.arange(part.d_s)


def make_policy(kind, dsc=None, posc=None, reuse_optimal_sigma: bool = False) -> Policy:
    """Build a policy from sweep solutions.

    ``dsc`` is an ML-DSC :class:`~mldsc.sweep.Solution` and ``posc`` a
    joint-memory one. The swap kinds build ``K_i`` from the covariance of
    their own closed loop unless ``reuse_optimal_sigma`` is set, in which case
    they reuse the ML-DSC optimal covariance.
    """
    kind = PolicyKind(kind)
    base = dsc if dsc is not None else posc
    if base is None:
        raise ContractError("at least one solution is required")
    p, psi, mu = base.problem, base.gains.Psi, base.moments.mu

    def need(sol, what):
        if sol is None:
            raise ContractError(f"policy {kind.value!r} needs the {what} solution")
        return sol

    if kind is PolicyKind.MLDSC_OPT:
        sol = need(dsc, "ML-DSC")
        return Policy(kind, p, psi, sol.feedback, sol.moments)
    if kind is PolicyKind.MLPOSC:
        sol = need(posc, "joint-memory")
        return Policy(kind, p, psi, sol.feedback, sol.moments)
    if kind is PolicyKind.COSC:
        Sigma = propagate_covariance(p, psi, GainRule.IDENTITY)
        return Policy(kind, p, psi, psi, MomentTrajectory(mu, Sigma))
    G = psi if kind is PolicyKind.PSI_SWAP else need(posc, "joint-memory").feedback
    if reuse_optimal_sigma:
        Sigma = need(dsc, "ML-DSC").moments.Sigma
    else:
        Sigma = propagate_covariance(p, G, GainRule.PER_CONTROLLER)
    return Policy(kind, p, psi, G, MomentTrajectory(mu, Sigma))


def _embed(pol: Policy, i: int, info) -> np.ndarray:
    info = np.asarray(info, dtype=float).reshape(-1)
    idx = pol.information_set(i)
    d = pol.problem.d_s
    s = np.zeros(d)
    if info.size == d:
        s[idx] = info[idx]
    elif info.size == idx.size:
        s[idx] = info
    else:
        raise ContractError(
            f"{pol.kind.value} controller {i} reads {idx.size} coordinates; got an information vector of length {info.size}"
        )
    return s


def feedback_matrix(pol: Policy, i: int, t: float) -> tuple[np.ndarray, np.ndarray]:
    """``(F, feedthrough)`` with ``u_i = F s_hat + feedthrough``.

    ``F = -R_ii^{-1} B_i' G(t) K(t)`` and ``feedthrough = -R_ii^{-1} B_i' Psi(t) mu(t)``.
    """
    p = pol.problem
    idx = pol.information_set(i)
    Sigma = sample_at(pol.moments.Sigma, t)
    K = gain_from_indices(Sigma, idx)
    Bi, Rii = p.B[i], p.R[i]
    F = -np.linalg.solve(Rii, Bi.T @ sample_at(pol.gain, t) @ K)
    ff = -np.linalg.solve(Rii, Bi.T @ sample_at(pol.psi, t) @ sample_at(pol.moments.mu, t)[:, 0])
    return F, ff


def evaluate_control(pol: Policy, i: int, t: float, info) -> np.ndarray:
    """Control of controller ``i`` at time ``t``.

    ``info`` is either a full extended-state vector (coordinates outside the
    controller's information set are ignored) or just the coordinates of that
    set, in extended-state order.
    """
    s = _embed(pol, i, info)
    F, ff = feedback_matrix(pol, i, t)
    s_hat = s - sample_at(pol.moments.mu, t)[:, 0]
    return F @ s_hat + ff


@dataclass(frozen=True)
class ControlSchedule:
    """Per-controller affine maps on the information coordinates at a list of times.

    ``u_i(t_k) = gains[i][k] @ s[info[i]] + offsets[i][k]``.
    """

    times: np.ndarray
    info: tuple[np.ndarray, ...]
    gains: tuple[np.ndarray, ...]
    offsets: tuple[np.ndarray, ...]
    full: tuple[np.ndarray, ...]  # F at every time, all d_s columns
    feedthrough: tuple[np.ndarray, ...]


def control_schedule(pol: Policy, times, hermite: bool = False) -> ControlSchedule:
    """Vectorized :func:`feedback_matrix` over an array of times."""
    times = np.asarray(times, dtype=float)
    p = pol.problem
    G = sample_many(pol.gain, times, hermite)
    Psi = sample_many(pol.psi, times, hermite)
    mu = sample_many(pol.moments.mu, times, hermite)[:, :, 0]
    Sigma = sample_many(pol.moments.Sigma, times, hermite)
    infos, gains, offsets, full, ffs = [], [], [], [], []
    for i in range(p.N):
        idx = pol.information_set(i)
        K = gains_from_indices(Sigma, idx)
        RB = np.linalg.solve(p.R[i], p.B[i].T)
        F = -(RB @ G @ K)
        ff = -np.einsum("ij,tjk,tk->ti", RB, Psi, mu)
        infos.append(idx)
        gains.append(np.ascontiguousarray(F[:, :, idx]))
        offsets.append(ff - np.einsum("tij,tj->ti", F, mu))
        full.append(F)
        ffs.append(ff)
    return ControlSchedule(times, tuple(infos), tuple(gains), tuple(offsets), tuple(full), tuple(ffs))
