"""SIMP compliance minimisation on a 2D plane-stress cantilever.

Density fields are ``(nely, nelx)`` float64 arrays, row-major with the top
row first, the same orientation used for dataset images.  Nodes are numbered
column by column from the top-left corner, each carrying an (x, y) DOF pair
with y pointing up, so a downward load is negative.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from topogan.errors import DataError, OptimizationError, ParameterError, SolverError

log = logging.getLogger(__name__)

YOUNG = 1.0
POISSON = 0.3
X_MIN = 1e-3
MOVE = 0.2
DAMPING = 0.5
RESIDUAL_RTOL = 1e-8


@dataclasses.dataclass(frozen=True)
class Mesh:
    nelx: int
    nely: int

    def __post_init__(self):
        if int(self.nelx) != self.nelx or int(self.nely) != self.nely:
            raise ParameterError("element counts must be integers")
        if self.nelx < 1 or self.nely < 1:
            raise ParameterError(f"mesh needs at least one element per axis, got {self.nelx}x{self.nely}")

    @property
    def n_elements(self) -> int:
        return self.nelx * self.nely

    @property
    def n_nodes(self) -> int:
        return (self.nelx + 1) * (self.nely + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nely, self.nelx)

    def node(self, row: int, col: int) -> int:
        """Node number at grid row ``row`` (0 = top) and column ``col``."""
        return col * (self.nely + 1) + row

    @classmethod
    def from_field(cls, density: np.ndarray) -> "Mesh":
        if density.ndim != 2:
            raise DataError(f"density field must be 2D, got shape {density.shape}")
        return cls(nelx=density.shape[1], nely=density.shape[0])


@dataclasses.dataclass(frozen=True)
class BoundaryCondition:
    fixed_dofs: np.ndarray
    loads: dict[int, float]

    def __post_init__(self):
        fixed = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        object.__setattr__(self, "fixed_dofs", fixed)
        if fixed.size < 3:
            raise ParameterError("at least 3 DOFs must be fixed to remove rigid-body modes")

    def load_vector(self, mesh: Mesh) -> np.ndarray:
        f = np.zeros(mesh.n_dofs)
        for dof, value in self.loads.items():
            if not 0 <= dof < mesh.n_dofs:
                raise ParameterError(f"load DOF {dof} outside mesh with {mesh.n_dofs} DOFs")
            f[dof] += value
        return f

    def free_dofs(self, mesh: Mesh) -> np.ndarray:
        if self.fixed_dofs.max() >= mesh.n_dofs or self.fixed_dofs.min() < 0:
            raise ParameterError("fixed DOF outside mesh")
        return np.setdiff1d(np.arange(mesh.n_dofs), self.fixed_dofs)


def cantilever(mesh: Mesh, magnitude: float = 1.0) -> BoundaryCondition:
    """Left edge clamped, downward point load at the middle of the right edge.

    With an odd ``nely`` there is no node on the midline, so the load is split
    evenly between the two nodes straddling it.
    """
    left = [mesh.node(r, 0) for r in range(mesh.nely + 1)]
    fixed = np.array([2 * n + k for n in left for k in (0, 1)])
    if mesh.nely % 2 == 0:
        rows = [mesh.nely // 2]
    else:
        rows = [mesh.nely // 2, mesh.nely // 2 + 1]
    share = -magnitude / len(rows)
    loads = {2 * mesh.node(r, mesh.nelx) + 1: share for r in rows}
    return BoundaryCondition(fixed_dofs=fixed, loads=loads)


@dataclasses.dataclass(frozen=True)
class SimpSettings:
    vol_frac: float
    penal: float = 3.0
    r_min: float = 1.5
    x_min: float = X_MIN
    max_iters: int = 200
    change_tol: float = 0.01

    def __post_init__(self):
        vals = (self.vol_frac, self.penal, self.r_min, self.x_min, self.change_tol)
        if not all(math.isfinite(v) for v in vals):
            raise ParameterError("SIMP settings must be finite")
        if not 0 < self.vol_frac <= 1:
            raise ParameterError(f"vol_frac must lie in (0, 1], got {self.vol_frac}")
        if self.penal < 1:
            raise ParameterError(f"penal must be >= 1, got {self.penal}")
        if self.r_min <= 0:
            raise ParameterError(f"r_min must be positive, got {self.r_min}")
        if not 0 < self.x_min < 1:
            raise ParameterError(f"x_min must lie in (0, 1), got {self.x_min}")
        if self.vol_frac < self.x_min:
            raise ParameterError("vol_frac below x_min is infeasible")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")


@dataclasses.dataclass
class OptimizationResult:
    density: np.ndarray
    compliance_history: list[float]
    iterations: int
    converged: bool
    final_compliance: float

    @property
    def initial_compliance(self) -> float:
        return self.compliance_history[0]


def element_stiffness(E: float = YOUNG, nu: float = POISSON) -> np.ndarray:
    """Closed-form 8x8 stiffness of a unit-square bilinear plane-stress element.

    DOF order is (x, y) for the lower-left, lower-right, upper-right and
    upper-left nodes.
    """
    if not (math.isfinite(E) and math.isfinite(nu)) or E <= 0 or not -1 < nu < 0.5:
        raise ParameterError(f"invalid material constants E={E}, nu={nu}")
    k = np.array([
        1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
        -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8,
    ])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return E / (1 - nu ** 2) * k[idx]


@functools.lru_cache(maxsize=16)
def _edofs(nelx: int, nely: int) -> np.ndarray:
    """(nely*nelx, 8) DOF table, elements in row-major order."""
    rows, cols = np.meshgrid(np.arange(nely), np.arange(nelx), indexing="ij")
    ul = cols * (nely + 1) + rows
    ll = ul + 1
    lr = ll + nely + 1
    ur = ul + nely + 1
    nodes = np.stack([ll, lr, ur, ul], axis=-1).reshape(-1, 4)
    edof = np.empty((nodes.shape[0], 8), dtype=np.int64)
    edof[:, 0::2] = 2 * nodes
    edof[:, 1::2] = 2 * nodes + 1
    edof.setflags(write=False)
    return edof


def element_dofs(mesh: Mesh) -> np.ndarray:
    return _edofs(mesh.nelx, mesh.nely)


def _check_density(density: np.ndarray) -> np.ndarray:
    x = np.asarray(density, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"density field must be 2D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("density field contains non-finite values")
    if np.any(x <= 0):
        raise DataError("density field must be strictly positive")
    return x


def stiffness_matrix(density: np.ndarray, penal: float, ke: np.ndarray | None = None) -> sp.csc_matrix:
    x = _check_density(density)
    mesh = Mesh.from_field(x)
    ke = element_stiffness() if ke is None else ke
    edof = element_dofs(mesh)
    i_k = np.repeat(edof, 8, axis=1).ravel()
    j_k = np.tile(edof, (1, 8)).ravel()
    s_k = (ke.ravel()[None, :] * (x.ravel() ** penal)[:, None]).ravel()
    k = sp.coo_matrix((s_k, (i_k, j_k)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsc()
    return k


@functools.lru_cache(maxsize=16)
def _banded_layout(nelx: int, nely: int, fixed: tuple[int, ...]):
    """Scatter plan from element-matrix entries into upper banded storage of K_red.

    Returns the free DOFs, the flat band index of every kept entry, the half
    bandwidth and the mask of kept entries among all n_el*64 element entries.
    """
    mesh = Mesh(nelx, nely)
    free = np.setdiff1d(np.arange(mesh.n_dofs), np.asarray(fixed, dtype=np.int64))
    reduced = np.full(mesh.n_dofs, -1, dtype=np.int64)
    reduced[free] = np.arange(free.size)
    edof = reduced[element_dofs(mesh)]
    ri = np.repeat(edof, 8, axis=1).ravel()
    cj = np.tile(edof, (1, 8)).ravel()
    keep = (ri >= 0) & (cj >= ri)
    bw = int((cj[keep] - ri[keep]).max()) if keep.any() else 0
    target = (bw + ri[keep] - cj[keep]) * free.size + cj[keep]
    return free, target, bw, keep


def _solve_reduced(x: np.ndarray, penal: float, mesh: Mesh, bc: BoundaryCondition, f: np.ndarray) -> np.ndarray:
    free, target, bw, keep = _banded_layout(mesh.nelx, mesh.nely, tuple(bc.fixed_dofs.tolist()))
    n = free.size
    vals = (element_stiffness().ravel()[None, :] * (x.ravel() ** penal)[:, None]).ravel()[keep]
    ab = np.bincount(target, weights=vals, minlength=(bw + 1) * n).reshape(bw + 1, n)
    try:
        u_red = sla.solveh_banded(ab, f[free], check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"reduced stiffness matrix is singular: {exc}") from exc
    return u_red


def internal_forces(density: np.ndarray, penal: float, u: np.ndarray) -> np.ndarray:
    """K(x) U assembled element by element."""
    x = _check_density(density)
    mesh = Mesh.from_field(x)
    edof = element_dofs(mesh)
    fe = (x.ravel() ** penal)[:, None] * (u[edof] @ element_stiffness())
    return np.bincount(edof.ravel(), weights=fe.ravel(), minlength=mesh.n_dofs)


def assemble_and_solve(density: np.ndarray, penal: float, mesh: Mesh, bc: BoundaryCondition) -> np.ndarray:
    """Solve ``K(x) U = F`` with the fixed DOFs eliminated; returns the full U.

    The reduced system is factorised as a banded Cholesky; the column-wise node
    numbering keeps the half bandwidth at 2*nely + 3.
    """
    x = _check_density(density)
    if x.shape != mesh.shape:
        raise DataError(f"density shape {x.shape} does not match mesh {mesh.shape}")
    f = bc.load_vector(mesh)
    free = bc.free_dofs(mesh)
    u = np.zeros(mesh.n_dofs)
    if not np.any(f):
        return u
    u_red = _solve_reduced(x, penal, mesh, bc, f)
    if not np.all(np.isfinite(u_red)):
        raise SolverError("solve produced non-finite displacements")
    u[free] = u_red
    residual = np.linalg.norm((internal_forces(x, penal, u) - f)[free])
    if residual > RESIDUAL_RTOL * np.linalg.norm(f):
        raise SolverError(f"equilibrium residual {residual:.3e} exceeds tolerance")
    return u


def element_energies(density: np.ndarray, u: np.ndarray, ke: np.ndarray | None = None) -> np.ndarray:
    """u_e^T k0 u_e per element, shaped like the density field."""
    x = _check_density(density)
    mesh = Mesh.from_field(x)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (mesh.n_dofs,):
        raise DataError(f"displacement vector of length {u.size} does not match {mesh.n_dofs} DOFs")
    ke = element_stiffness() if ke is None else ke
    ue = u[element_dofs(mesh)]
    return np.einsum("ei,ij,ej->e", ue, ke, ue).reshape(mesh.shape)


def compliance(density: np.ndarray, u: np.ndarray, penal: float) -> float:
    x = _check_density(density)
    ce = element_energies(x, u)
    return float(np.sum(x ** penal * ce))


def sensitivities(density: np.ndarray, u: np.ndarray, penal: float) -> np.ndarray:
    x = _check_density(density)
    ce = element_energies(x, u)
    return -penal * x ** (penal - 1) * ce


@functools.lru_cache(maxsize=16)
def _filter_weights(nelx: int, nely: int, r_min: float) -> tuple[sp.csr_matrix, np.ndarray]:
    reach = math.ceil(r_min) - 1
    rows, cols, vals = [], [], []
    ey, ex = np.meshgrid(np.arange(nely), np.arange(nelx), indexing="ij")
    ey, ex = ey.ravel(), ex.ravel()
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            w = r_min - math.hypot(dx, dy)
            if w <= 0:
                continue
            ny, nx = ey + dy, ex + dx
            ok = (ny >= 0) & (ny < nely) & (nx >= 0) & (nx < nelx)
            rows.append((ey * nelx + ex)[ok])
            cols.append((ny * nelx + nx)[ok])
            vals.append(np.full(ok.sum(), w))
    n = nelx * nely
    h = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    hs = np.asarray(h.sum(axis=1)).ravel()
    return h, hs


def filter_weights(mesh: Mesh, r_min: float) -> tuple[sp.csr_matrix, np.ndarray]:
    """Cone weights ``max(0, r_min - dist)`` between element centres and their row sums."""
    return _filter_weights(mesh.nelx, mesh.nely, float(r_min))


def filter_sensitivities(sens: np.ndarray, density: np.ndarray, r_min: float) -> np.ndarray:
    """Mesh-independency filter: density-weighted neighbourhood average of the gradient."""
    if not r_min > 0:
        raise ParameterError(f"r_min must be positive, got {r_min}")
    x = _check_density(density)
    sens = np.asarray(sens, dtype=np.float64)
    if sens.shape != x.shape:
        raise DataError("sensitivity and density shapes differ")
    if r_min <= 1:
        # only the self weight survives
        return sens.copy()
    h, hs = filter_weights(Mesh.from_field(x), r_min)
    xf = x.ravel()
    out = (h @ (xf * sens.ravel())) / hs / xf
    return out.reshape(x.shape)


def oc_update(density: np.ndarray, filtered_sens: np.ndarray, settings: SimpSettings,
              max_bisections: int = 200) -> np.ndarray:
    """Optimality-criteria step with a bisected volume multiplier.

    Bisection stops once the multiplier bracket is tight (relative 1e-3) and
    the volume residual is at most 1e-9, or when the residual vanishes.
    """
    x = _check_density(density)
    dc = np.asarray(filtered_sens, dtype=np.float64)
    if dc.shape != x.shape:
        raise DataError("sensitivity and density shapes differ")
    drive = np.maximum(-dc, 0.0)
    lo = np.maximum(settings.x_min, x - MOVE)
    hi = np.minimum(1.0, x + MOVE)
    target = settings.vol_frac
    l1, l2 = 0.0, 1e9
    x_new = x
    err = math.inf
    for _ in range(max_bisections):
        lmid = 0.5 * (l1 + l2)
        x_new = np.clip(x * (drive / lmid) ** DAMPING, lo, hi)
        vol = x_new.mean()
        err = vol - target
        if abs(err) <= 1e-12 or (abs(err) <= 1e-9 and (l2 - l1) / (l1 + l2) < 1e-3):
            break
        if err > 0:
            l1 = lmid
        else:
            l2 = lmid
    if abs(err) > 1e-4:
        raise OptimizationError(
            f"volume bisection failed to bracket: mean density {x_new.mean():.6f}, target {target}"
        )
    return x_new


def optimize(settings: SimpSettings, mesh: Mesh, bc: BoundaryCondition | None = None) -> OptimizationResult:
    bc = cantilever(mesh) if bc is None else bc
    x = np.full(mesh.shape, settings.vol_frac, dtype=np.float64)
    history: list[float] = []
    converged = False
    it = 0
    while it < settings.max_iters:
        it += 1
        u = assemble_and_solve(x, settings.penal, mesh, bc)
        ce = element_energies(x, u)
        history.append(float(np.sum(x ** settings.penal * ce)))
        dc = -settings.penal * x ** (settings.penal - 1) * ce
        dc = filter_sensitivities(dc, x, settings.r_min)
        x_new = oc_update(x, dc, settings)
        change = float(np.max(np.abs(x_new - x)))
        x = x_new
        log.debug("it %3d  c=%.4f  vol=%.4f  change=%.4f", it, history[-1], x.mean(), change)
        if change < settings.change_tol:
            converged = True
            break
    u = assemble_and_solve(x, settings.penal, mesh, bc)
    final_c = compliance(x, u, settings.penal)
    return OptimizationResult(
        density=x, compliance_history=history, iterations=it, converged=converged, final_compliance=final_c
    )
