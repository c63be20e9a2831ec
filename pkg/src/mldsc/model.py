"""Extended-state LQG problem: block partition, assembly from per-controller
state/observation/memory models, validation, presets and JSON round trip.

The extended state is ``s = (x, z^0, ..., z^{N-1})``. Controllers are indexed
from 0. Each controller's control vector is laid out as
``(state controls, own-memory controls, communication controls)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.linalg import block_diag

from .errors import AssemblyError, ProblemValidationError

TOL_PSD = 1e-10  # relative to the largest |eigenvalue|
TOL_PD = 1e-12  # absolute
TOL_SYM = 1e-10  # relative to max(1, max|entry|)


def _frozen(a: Any, ndim: int | None = None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim == 0:
        arr = arr.reshape(1, 1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BlockPartition:
    """Dimensions of the state block and of each controller's memory block."""

    d_x: int
    d_z: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "d_z", tuple(int(d) for d in self.d_z))
        object.__setattr__(self, "d_x", int(self.d_x))
        if self.d_x < 1:
            raise AssemblyError(f"d_x must be >= 1, got {self.d_x}")
        if len(self.d_z) < 1:
            raise AssemblyError("at least one controller is required")
        if any(d < 1 for d in self.d_z):
            raise AssemblyError(f"every memory dimension must be >= 1, got {self.d_z}")

    @property
    def N(self) -> int:
        return len(self.d_z)

    @property
    def d_s(self) -> int:
        return self.d_x + sum(self.d_z)

    @property
    def x_range(self) -> tuple[int, int]:
        return (0, self.d_x)

    def z_range(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.N:
            raise IndexError(f"controller index {i} out of range for N={self.N}")
        start = self.d_x + sum(self.d_z[:i])
        return (start, start + self.d_z[i])

    def ranges(self) -> list[tuple[int, int]]:
        """Block ranges in order (x, z^0, ..., z^{N-1})."""
        return [self.x_range] + [self.z_range(i) for i in range(self.N)]

    def x_indices(self) -> np.ndarray:
        return np.arange(0, self.d_x)

    def z_indices(self, i: int) -> np.ndarray:
        return np.arange(*self.z_range(i))

    def memory_indices(self) -> np.ndarray:
        return np.arange(self.d_x, self.d_s)


@dataclass(frozen=True, eq=False)
class LqgProblem:
    """Time-invariant extended-state LQG instance.

    ``B`` and ``R`` are per-controller lists; storing ``R`` as diagonal
    blocks makes the block-diagonal control cost structural.
    """

    partition: BlockPartition
    A: np.ndarray
    B: tuple[np.ndarray, ...]
    sigma: np.ndarray
    Q: np.ndarray
    R: tuple[np.ndarray, ...]
    P: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray
    T: float

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen(self.A, 2))
        object.__setattr__(self, "B", tuple(_frozen(b, 2) for b in self.B))
        object.__setattr__(self, "sigma", _frozen(self.sigma, 2))
        object.__setattr__(self, "Q", _frozen(self.Q, 2))
        object.__setattr__(self, "R", tuple(_frozen(r, 2) for r in self.R))
        object.__setattr__(self, "P", _frozen(self.P, 2))
        object.__setattr__(self, "mu0", _frozen(self.mu0).reshape(-1))
        object.__setattr__(self, "Sigma0", _frozen(self.Sigma0, 2))
        object.__setattr__(self, "T", float(self.T))

    @property
    def N(self) -> int:
        return self.partition.N

    @property
    def d_s(self) -> int:
        return self.partition.d_s

    @property
    def d_u(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.B)

    def control_weights(self) -> tuple[np.ndarray, ...]:
        """Per-controller ``B_i R_ii^{-1} B_i^T``."""
        return tuple(b @ np.linalg.solve(r, b.T) for b, r in zip(self.B, self.R))

    def total_control_weight(self) -> np.ndarray:
        """``B R^{-1} B^T`` for the block-diagonal ``R``."""
        return sum(self.control_weights())

    def diffusion(self) -> np.ndarray:
        return self.sigma @ self.sigma.T

    def with_changes(self, **changes) -> LqgProblem:
        fields = {name: getattr(self, name) for name in self.__dataclass_fields__}
        fields.update(changes)
        return LqgProblem(**fields)

    # --- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "partition": {"d_x": self.partition.d_x, "d_z": list(self.partition.d_z)},
            "A": self.A.tolist(),
            "B": [b.tolist() for b in self.B],
            "sigma": self.sigma.tolist(),
            "Q": self.Q.tolist(),
            "R": [r.tolist() for r in self.R],
            "P": self.P.tolist(),
            "mu0": self.mu0.tolist(),
            "Sigma0": self.Sigma0.tolist(),
            "T": self.T,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LqgProblem:
        try:
            part = data["partition"]
            return cls(
                partition=BlockPartition(part["d_x"], tuple(part["d_z"])),
                A=data["A"],
                B=tuple(data["B"]),
                sigma=data["sigma"],
                Q=data["Q"],
                R=tuple(data["R"]),
                P=data["P"],
                mu0=data["mu0"],
                Sigma0=data["Sigma0"],
                T=data["T"],
            )
        except KeyError as exc:
            raise AssemblyError(f"problem document is missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise AssemblyError(f"malformed problem document: {exc}") from None

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> LqgProblem:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class ControllerSpec:
    """Linear observation and memory model of one controller.

    Observation drift ``dy^i = (H x + sum_j G[j] c^j) dt + gamma dnu^i`` and
    memory ``dz^i = v^i dt + kappa dy^i``. ``G`` maps the index ``j`` of a
    communicating controller to the matrix through which ``c^j`` enters this
    controller's observation.
    """

    index: int
    H: np.ndarray
    gamma: np.ndarray
    kappa: np.ndarray
    d_comm: int = 0
    G: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "H", _frozen(self.H, 2))
        object.__setattr__(self, "gamma", _frozen(self.gamma, 2))
        object.__setattr__(self, "kappa", _frozen(self.kappa, 2))
        object.__setattr__(self, "G", {int(j): _frozen(g, 2) for j, g in dict(self.G).items()})

    @property
    def d_y(self) -> int:
        return self.H.shape[0]

    @property
    def d_z(self) -> int:
        return self.kappa.shape[0]


@dataclass(frozen=True)
class Violation:
    invariant: str
    entry: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.invariant} [{self.entry}]" + (f": {self.detail}" if self.detail else "")


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self) -> None:
        if not self.ok:
            raise ProblemValidationError(self)


def assemble_extended_problem(
    state_A,
    state_B: Sequence,
    state_sigma,
    specs: Sequence[ControllerSpec],
    Q,
    R: Sequence,
    P,
    mu0,
    Sigma0,
    T: float,
) -> LqgProblem:
    """Build the extended-state problem from state, observation and memory models.

    ``state_B[i]`` is controller ``i``'s direct actuation of the state.
    ``mu0`` and ``Sigma0`` are either full extended-state arrays or sequences
    of per-block pieces ``(x, z^0, ..., z^{N-1})``; block pieces give a
    block-diagonal initial covariance.
    """
    state_A = np.atleast_2d(np.asarray(state_A, dtype=float))
    state_sigma = np.atleast_2d(np.asarray(state_sigma, dtype=float))
    d_x = state_A.shape[0]
    if state_A.shape != (d_x, d_x):
        raise AssemblyError(f"state A must be square, got {state_A.shape}")
    if state_sigma.shape[0] != d_x:
        raise AssemblyError(f"state sigma has {state_sigma.shape[0]} rows, expected {d_x}")

    indices = [s.index for s in specs]
    if len(set(indices)) != len(indices):
        raise AssemblyError(f"duplicate controller index in {indices}")
    if sorted(indices) != list(range(len(specs))):
        raise AssemblyError(f"controller indices must be 0..{len(specs) - 1}, got {sorted(indices)}")
    specs = sorted(specs, key=lambda s: s.index)
    N = len(specs)
    if len(state_B) != N:
        raise AssemblyError(f"{len(state_B)} state actuation matrices for {N} controllers")

    for s in specs:
        if s.H.shape[1] != d_x:
            raise AssemblyError(f"H of controller {s.index} has {s.H.shape[1]} columns, expected {d_x}")
        if s.gamma.shape[0] != s.d_y:
            raise AssemblyError(f"gamma of controller {s.index} has {s.gamma.shape[0]} rows, expected {s.d_y}")
        if s.kappa.shape[1] != s.d_y:
            raise AssemblyError(f"kappa of controller {s.index} has {s.kappa.shape[1]} columns, expected {s.d_y}")
        for j, g in s.G.items():
            if not 0 <= j < N:
                raise AssemblyError(f"G of controller {s.index} references unknown controller {j}")
            if g.shape != (s.d_y, specs[j].d_comm):
                raise AssemblyError(
                    f"G[{s.index},{j}] has shape {g.shape}, expected {(s.d_y, specs[j].d_comm)}"
                )

    part = BlockPartition(d_x, tuple(s.d_z for s in specs))
    d_s = part.d_s
    xs = slice(*part.x_range)
    zs = [slice(*part.z_range(i)) for i in range(N)]

    A = np.zeros((d_s, d_s))
    A[xs, xs] = state_A
    for i, s in enumerate(specs):
        A[zs[i], xs] = s.kappa @ s.H

    B = []
    for i, s in enumerate(specs):
        b_state = np.atleast_2d(np.asarray(state_B[i], dtype=float))
        if b_state.shape[0] != d_x:
            raise AssemblyError(f"state actuation of controller {i} has {b_state.shape[0]} rows, expected {d_x}")
        d_us, d_v, d_c = b_state.shape[1], s.d_z, s.d_comm
        Bi = np.zeros((d_s, d_us + d_v + d_c))
        Bi[xs, :d_us] = b_state
        Bi[zs[i], d_us : d_us + d_v] = np.eye(d_v)
        for j, other in enumerate(specs):
            if i in other.G:
                Bi[zs[j], d_us + d_v :] += other.kappa @ other.G[i]
        B.append(Bi)

    sigma = block_diag(state_sigma, *[s.kappa @ s.gamma for s in specs])

    mu0 = _assemble_mean(mu0, part)
    Sigma0 = _assemble_cov(Sigma0, part)
    return LqgProblem(part, A, tuple(B), sigma, Q, tuple(R), P, mu0, Sigma0, T)


def _assemble_mean(mu0, part: BlockPartition) -> np.ndarray:
    if isinstance(mu0, (list, tuple)) and len(mu0) == part.N + 1 and all(np.ndim(m) == 1 for m in mu0):
        pieces = [np.asarray(m, dtype=float) for m in mu0]
        for (lo, hi), m in zip(part.ranges(), pieces):
            if m.shape != (hi - lo,):
                raise AssemblyError(f"initial mean block has length {m.size}, expected {hi - lo}")
        return np.concatenate(pieces)
    arr = np.asarray(mu0, dtype=float).reshape(-1)
    if arr.shape != (part.d_s,):
        raise AssemblyError(f"mu0 has length {arr.size}, expected {part.d_s}")
    return arr


def _assemble_cov(Sigma0, part: BlockPartition) -> np.ndarray:
    if isinstance(Sigma0, (list, tuple)) and len(Sigma0) == part.N + 1 and all(
        np.ndim(b) == 2 for b in Sigma0
    ):
        blocks = [np.asarray(b, dtype=float) for b in Sigma0]
        for (lo, hi), b in zip(part.ranges(), blocks):
            if b.shape != (hi - lo, hi - lo):
                raise AssemblyError(f"initial covariance block has shape {b.shape}, expected {(hi - lo, hi - lo)}")
        return block_diag(*blocks)
    arr = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    if arr.shape != (part.d_s, part.d_s):
        raise AssemblyError(f"Sigma0 has shape {arr.shape}, expected {(part.d_s, part.d_s)}")
    return arr


def _check_symmetric(name: str, M: np.ndarray, out: list[Violation]) -> None:
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if asym > TOL_SYM * scale:
        out.append(Violation("matrix not symmetric", name, f"max asymmetry {asym:.3g}"))


def _check_psd(name: str, M: np.ndarray, out: list[Violation]) -> None:
    eig = np.linalg.eigvalsh((M + M.T) / 2)
    scale = float(np.max(np.abs(eig))) if eig.size else 0.0
    if eig.size and eig[0] < -TOL_PSD * scale:
        out.append(Violation("matrix not positive semidefinite", name, f"min eigenvalue {eig[0]:.3g}"))


def validate_problem(p: LqgProblem) -> ValidationReport:
    """Collect every structural violation; never raises."""
    out: list[Violation] = []
    d = p.d_s

    def shape(name, M, expected):
        if M.shape != expected:
            out.append(Violation("dimension mismatch", name, f"shape {M.shape}, expected {expected}"))
            return False
        if not np.all(np.isfinite(M)):
            out.append(Violation("non-finite entries", name))
            return False
        return True

    shape("A", p.A, (d, d))
    if p.sigma.ndim != 2 or p.sigma.shape[0] != d:
        out.append(Violation("dimension mismatch", "sigma", f"shape {p.sigma.shape}, expected ({d}, *)"))
    elif not np.all(np.isfinite(p.sigma)):
        out.append(Violation("non-finite entries", "sigma"))
    shape("mu0", p.mu0, (d,))
    for name, M in (("Q", p.Q), ("P", p.P), ("Sigma0", p.Sigma0)):
        if shape(name, M, (d, d)):
            _check_symmetric(name, M, out)
            _check_psd(name, M, out)

    if len(p.B) != p.N:
        out.append(Violation("dimension mismatch", "B", f"{len(p.B)} blocks for {p.N} controllers"))
    if len(p.R) != p.N:
        out.append(Violation("dimension mismatch", "R", f"{len(p.R)} blocks for {p.N} controllers"))
    for i, (b, r) in enumerate(zip(p.B, p.R)):
        if b.ndim != 2 or b.shape[0] != d:
            out.append(Violation("dimension mismatch", f"B[{i}]", f"shape {b.shape}, expected ({d}, *)"))
            continue
        if not shape(f"R[{i}]", r, (b.shape[1], b.shape[1])):
            continue
        _check_symmetric(f"R[{i}]", r, out)
        eig = np.linalg.eigvalsh((r + r.T) / 2)
        if eig[0] < TOL_PD:
            out.append(Violation("R block not positive definite", f"R[{i}]", f"min eigenvalue {eig[0]:.3g}"))

    if not (np.isfinite(p.T) and p.T > 0):
        out.append(Violation("horizon must be positive", "T", f"T = {p.T}"))
    return ValidationReport(tuple(out))


def require_valid(p: LqgProblem) -> None:
    validate_problem(p).raise_if_invalid()


def paper_experiment() -> LqgProblem:
    """Two controllers with scalar memories that communicate into each other's
    observation channel; minimize the state variance with small controls over
    ``[0, 10]``.

    Both control vectors map onto the extended state through the identity,
    i.e. controller 1's control is ordered ``(u, c, v)`` here (see
    :func:`paper_experiment_components` for the assembled equivalent).
    """
    part = BlockPartition(1, (1, 1))
    A = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    I3 = np.eye(3)
    return LqgProblem(
        partition=part,
        A=A,
        B=(I3, I3),
        sigma=I3,
        Q=np.diag([1.0, 0.0, 0.0]),
        R=(I3, I3),
        P=np.zeros((3, 3)),
        mu0=np.zeros(3),
        Sigma0=I3,
        T=10.0,
    )


def paper_experiment_components() -> dict:
    """Component models of the preset, as keyword arguments for
    :func:`assemble_extended_problem`."""
    one = [[1.0]]
    specs = [
        ControllerSpec(0, H=one, gamma=one, kappa=one, d_comm=1, G={1: one}),
        ControllerSpec(1, H=one, gamma=one, kappa=one, d_comm=1, G={0: one}),
    ]
    return dict(
        state_A=one,
        state_B=[one, one],
        state_sigma=one,
        specs=specs,
        Q=np.diag([1.0, 0.0, 0.0]),
        R=[np.eye(3), np.eye(3)],
        P=np.zeros((3, 3)),
        mu0=[np.zeros(1), np.zeros(1), np.zeros(1)],
        Sigma0=[np.eye(1), np.eye(1), np.eye(1)],
        T=10.0,
    )


PRESETS = {"paper": paper_experiment}
