"""Memory gains, closed-loop mean/covariance propagation and conditional covariances."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Literal, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, IntegrationError, SingularityError
from .model import BlockPartition, LqgProblem
from .numerics import MatrixTrajectory, StageTable, integrate_ode, spd_solve, symmetrize

Engine = Literal["compiled", "python"]


class GainRule(str, Enum):
    """How the feedback in the covariance equation conditions on memory."""

    PER_CONTROLLER = "per-controller"  # each controller sees its own z^i
    JOINT = "joint"  # one team gain on (z^0, ..., z^{N-1})
    IDENTITY = "identity"  # full-information override, K = I


@dataclass(frozen=True)
class GainBlock:
    """Index set a gain conditions on, together with the weight ``B R^{-1} B^T`` it feeds."""

    indices: np.ndarray
    weight: np.ndarray


def gain_structure(p: LqgProblem, rule: GainRule) -> list[GainBlock]:
    rule = GainRule(rule)
    part = p.partition
    if rule is GainRule.PER_CONTROLLER:
        return [GainBlock(part.z_indices(i), symmetrize(M)) for i, M in enumerate(p.control_weights())]
    brb = symmetrize(p.total_control_weight())
    if rule is GainRule.JOINT:
        return [GainBlock(part.memory_indices(), brb)]
    return [GainBlock(np.arange(p.d_s), brb)]


def gain_from_indices(Sigma: np.ndarray, idx: np.ndarray, name: str = "memory block") -> np.ndarray:
    """Gain mapping a deviation to its conditional mean given the coordinates ``idx``.

    Columns ``idx`` hold ``Sigma[:, idx] Sigma[idx, idx]^{-1}`` with an exact
    identity on the ``(idx, idx)`` block; every other column is zero.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    d = Sigma.shape[0]
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == d:
        return np.eye(d)
    K = np.zeros((d, d))
    X = spd_solve(Sigma[np.ix_(idx, idx)], Sigma[idx, :], name)
    K[:, idx] = X.T
    K[np.ix_(idx, idx)] = np.eye(idx.size)
    return K


def gains_from_indices(Sigmas: np.ndarray, idx: np.ndarray, name: str = "memory block") -> np.ndarray:
    """Batched :func:`gain_from_indices` over a stack of covariances."""
    Sigmas = np.asarray(Sigmas, dtype=float)
    n, d, _ = Sigmas.shape
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == d:
        return np.broadcast_to(np.eye(d), (n, d, d)).copy()
    S_bb = Sigmas[:, idx][:, :, idx]
    S_b = Sigmas[:, idx, :]
    try:
        np.linalg.cholesky(S_bb)
        X = np.linalg.solve(S_bb, S_b)
    except np.linalg.LinAlgError:
        X = np.stack([spd_solve(a, b, name) for a, b in zip(S_bb, S_b)])
    K = np.zeros((n, d, d))
    K[:, :, idx] = np.swapaxes(X, 1, 2)
    K[:, idx[:, None], idx[None, :]] = np.eye(idx.size)
    return K


def memory_gain(Sigma: np.ndarray, i: int, partition: BlockPartition) -> np.ndarray:
    """``K_i``: conditional-mean gain of controller ``i``'s memory block."""
    return gain_from_indices(Sigma, partition.z_indices(i), f"Sigma[z{i}, z{i}]")


def joint_memory_gain(Sigma: np.ndarray, partition: BlockPartition) -> np.ndarray:
    """``K``: conditional-mean gain of the joint memory ``(z^0, ..., z^{N-1})``."""
    return gain_from_indices(Sigma, partition.memory_indices(), "Sigma[z, z]")


def conditional_covariance(Sigma: np.ndarray, a_idx: Sequence[int], b_idx: Sequence[int]) -> np.ndarray:
    """Schur complement ``Sigma_aa - Sigma_ab Sigma_bb^{-1} Sigma_ba``."""
    Sigma = np.asarray(Sigma, dtype=float)
    a = np.asarray(a_idx, dtype=np.int64).reshape(-1)
    b = np.asarray(b_idx, dtype=np.int64).reshape(-1)
    d = Sigma.shape[0]
    if np.intersect1d(a, b).size:
        raise ContractError(f"index sets overlap: {sorted(set(a) & set(b))}")
    for name, ix in (("a", a), ("b", b)):
        if ix.size and (ix.min() < 0 or ix.max() >= d):
            raise ContractError(f"index set {name} outside [0, {d})")
        if np.unique(ix).size != ix.size:
            raise ContractError(f"index set {name} has duplicates")
    S_aa = Sigma[np.ix_(a, a)]
    if b.size == 0:
        return symmetrize(S_aa)
    S_ab = Sigma[np.ix_(a, b)]
    X = spd_solve(Sigma[np.ix_(b, b)], S_ab.T, "Sigma_bb")
    return symmetrize(S_aa - S_ab @ X)


@dataclass(frozen=True)
class MomentTrajectory:
    mu: MatrixTrajectory
    Sigma: MatrixTrajectory


# --- compiled-kernel plumbing ------------------------------------------------


def pack_blocks(blocks: Sequence[GainBlock]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx_flat = np.concatenate([b.indices for b in blocks]).astype(np.int64)
    offsets = np.cumsum([0] + [b.indices.size for b in blocks]).astype(np.int64)
    Ms = np.ascontiguousarray(np.stack([b.weight for b in blocks]))
    return idx_flat, offsets, Ms


def raise_kernel_status(status: int, node: int, what: str, grid) -> None:
    if status == _kernels.OK:
        return
    t = grid.times[min(max(node, 0), grid.n_steps)]
    if status == _kernels.NONFINITE:
        raise IntegrationError(f"{what}: non-finite value at node {node} (t = {t:.6g})", node=node)
    raise SingularityError(f"{what}: memory covariance block singular near node {node} (t = {t:.6g})")


def _stage_arrays(traj: MatrixTrajectory) -> tuple[np.ndarray, np.ndarray]:
    return np.ascontiguousarray(traj.values), np.ascontiguousarray(traj.midpoints())


# --- propagation ----------------------------------------------------------------


def propagate_mean(p: LqgProblem, Psi: MatrixTrajectory) -> MatrixTrajectory:
    """Mean under the certainty-equivalent feedthrough: ``mu' = (A - B R^{-1} B^T Psi) mu``."""
    grid = Psi.grid
    if not np.any(p.mu0):
        # zero is a fixed point of the homogeneous flow
        zeros = np.zeros((grid.n_steps + 1, p.d_s, 1))
        return MatrixTrajectory(grid, zeros, zeros)
    A, brb = p.A, symmetrize(p.total_control_weight())
    psi = StageTable(Psi)
    return integrate_ode(lambda t, m: (A - brb @ psi(t)) @ m, p.mu0, grid, "forward")


def propagate_covariance(
    p: LqgProblem, Phi: MatrixTrajectory, gain_rule: GainRule, engine: Engine = "compiled"
) -> MatrixTrajectory:
    """Closed-loop covariance with ``A_cl = A - sum_b M_b Phi K_b(Sigma)``; gains are rebuilt at every RK4 stage."""
    blocks = gain_structure(p, gain_rule)
    grid = Phi.grid
    D = symmetrize(p.diffusion())
    if engine == "compiled":
        idx_flat, offsets, Ms = pack_blocks(blocks)
        nodes, mids = _stage_arrays(Phi)
        vals, ders, status, node = _kernels.forward_sigma(
            np.ascontiguousarray(p.Sigma0), nodes, mids, grid.dt, np.ascontiguousarray(p.A), D, idx_flat, offsets, Ms
        )
        raise_kernel_status(status, node, "covariance propagation", grid)
        return MatrixTrajectory(grid, vals, ders, symmetric=True)
    if engine != "python":
        raise ContractError(f"unknown engine {engine!r}")
    A = p.A
    phi = StageTable(Phi)

    def rhs(t, S):
        Ph = phi(t)
        Acl = A.copy()
        for b in blocks:
            Acl -= b.weight @ Ph @ gain_from_indices(S, b.indices)
        return D + Acl @ S + S @ Acl.T

    return integrate_ode(rhs, p.Sigma0, grid, "forward", symmetric=True)


def propagate_moments(
    p: LqgProblem,
    Psi: MatrixTrajectory,
    Phi: MatrixTrajectory,
    gain_rule: GainRule = GainRule.PER_CONTROLLER,
    engine: Engine = "compiled",
) -> MomentTrajectory:
    """Forward mean (driven by ``Psi``) and covariance (driven by ``Phi`` and the gain rule)."""
    if Psi.grid != Phi.grid:
        raise ContractError("Psi and Phi must share one grid")
    return MomentTrajectory(propagate_mean(p, Psi), propagate_covariance(p, Phi, gain_rule, engine))
