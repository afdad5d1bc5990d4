"""Variational coarse-graining of nonsymmetric coefficient fields.

On each triadic cube the quadratic functional

    J(p, q) = avg( -1/2 grad u . s grad u - p . a grad u + q . grad u )

is maximized over discrete a-harmonic mean-zero functions.  Its Hessian in
(p, q), shifted by the pairing p.q, is a symmetric positive semidefinite
2d x 2d matrix ``A`` that packages four coarse-grained quantities: an
upper symmetric part ``b``, a lower symmetric part ``s`` (its Schur
complement), a dual symmetric part ``s_star`` (inverse of the lower-right
block), and a skew-ish coupling ``k``.  For a single constant cell ``A``
reduces to a closed form in (s, k), which this module also uses as a fast
exact path for constant cubes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fields import CoefficientField
from .solver import (AssembledOperator, assemble, maximize_J_backend,
                     random_aharmonic)
from .triadic import TriadicCube, partition_children


def jswap(dim: int) -> np.ndarray:
    """Block anti-diagonal involution [[0, I], [I, 0]]."""
    J = np.zeros((2 * dim, 2 * dim))
    J[:dim, dim:] = np.eye(dim)
    J[dim:, :dim] = np.eye(dim)
    return J


def pointwise_A(s: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Closed-form coarse matrix of a single constant coefficient a = s + k.

    Batched over leading axes: s, k of shape (..., d, d) give (..., 2d, 2d).
    """
    s = np.asarray(s, float)
    k = np.asarray(k, float)
    d = s.shape[-1]
    sinv_k = np.linalg.solve(s, k)
    sinv = np.linalg.inv(s)
    A = np.zeros(s.shape[:-2] + (2 * d, 2 * d))
    A[..., :d, :d] = s + np.swapaxes(k, -1, -2) @ sinv_k
    A[..., :d, d:] = -np.swapaxes(sinv_k, -1, -2)
    A[..., d:, :d] = -sinv_k
    A[..., d:, d:] = sinv
    return A


def pointwise_A_cells(field: CoefficientField,
                      cube: TriadicCube | None = None) -> np.ndarray:
    """Per-cell closed-form coarse matrices on a cube, (side,)*dim + (2d, 2d)."""
    cube = cube or field.domain
    sl = cube.slices
    return pointwise_A(field.s_cells[sl], field.k_cells[sl])


def blocks_from_A(A: np.ndarray, dim: int):
    """Extract (s_star, k, b, s) from a coarse matrix."""
    d = dim
    A11, A12 = A[:d, :d], A[:d, d:]
    A21, A22 = A[d:, :d], A[d:, d:]
    eigs = np.linalg.eigvalsh(A22)
    if eigs.min() < 1e-12 * max(np.trace(A22), 1e-300):
        raise ValueError(f"degenerate lower block: min eig {eigs.min():.3e}")
    s_star = np.linalg.inv(A22)
    kmat = -s_star @ A21
    b = A11.copy()
    s = A11 - A12 @ np.linalg.solve(A22, A21)
    return s_star, kmat, b, s


@dataclass(frozen=True)
class CoarseGrainedMatrices:
    """Coarse-grained quantities of one cube."""

    cube: TriadicCube
    A: np.ndarray
    s_star: np.ndarray
    k: np.ndarray
    b: np.ndarray
    s: np.ndarray

    @classmethod
    def from_A(cls, A: np.ndarray, cube: TriadicCube) -> "CoarseGrainedMatrices":
        s_star, kmat, b, s = blocks_from_A(A, cube.dim)
        return cls(cube=cube, A=A, s_star=s_star, k=kmat, b=b, s=s)

    @property
    def dim(self) -> int:
        return self.cube.dim

    @property
    def symmetry_gap(self) -> np.ndarray:
        """s - s_star, the defect that vanishes for exactly homogeneous data."""
        return self.s - self.s_star


def _xi_basis(dim: int):
    """Polarization probe vectors: 2d basis directions plus all pair sums."""
    n = 2 * dim
    basis = list(np.eye(n))
    pairs, pair_idx = [], {}
    for i in range(n):
        for j in range(i + 1, n):
            pair_idx[(i, j)] = len(basis) + len(pairs)
            pairs.append(basis[i] + basis[j])
    return basis + pairs, pair_idx


def _pq_from_xi(xi: np.ndarray, dim: int):
    return -xi[:dim], xi[dim:]


def J_from_A(A: np.ndarray, p, q, dim: int) -> float:
    """Evaluate J(p, q) from a coarse matrix: J = xi.A xi / 2 - p.q."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    xi = np.concatenate([-p, q])
    return float(0.5 * xi @ A @ xi - p @ q)


def Jstar_from_A(A: np.ndarray, p, q, dim: int) -> float:
    """Evaluate the adjoint-field functional from the same coarse matrix.

    The transposed coefficient shares both diagonal blocks and negates the
    off-diagonal ones, i.e. A* = D A D with D = diag(I, -I).
    """
    D = np.eye(2 * dim)
    D[dim:, dim:] *= -1.0
    return J_from_A(D @ A @ D, p, q, dim)


def coarse_grain_cube(field: CoefficientField, cube: TriadicCube | None = None,
                      resolution: int = 1, op: AssembledOperator | None = None,
                      check: bool = True, psd_tol: float = 1e-8) -> CoarseGrainedMatrices:
    """Coarse-grain one cube by d(2d+1) saddle solves on one factorization.

    Constant cubes short-circuit to the exact closed form.  With ``check``
    the result is verified positive semidefinite up to ``psd_tol`` times its
    norm.
    """
    cube = cube or field.domain
    d = field.dim
    sl = cube.slices
    a_block = field.a_cells[sl].reshape(-1, d * d)
    if op is None and np.ptp(a_block, axis=0).max() == 0.0:
        A = pointwise_A(field.s_cells[sl].reshape(-1, d, d)[0],
                        field.k_cells[sl].reshape(-1, d, d)[0])
        return CoarseGrainedMatrices.from_A(A, cube)

    if op is None:
        op = assemble(field, cube, resolution)
    xis, pair_idx = _xi_basis(d)
    pairs = [_pq_from_xi(xi, d) for xi in xis]
    Jvals, _ = maximize_J_backend(op, pairs)
    Q = Jvals + np.array([p @ q for p, q in pairs])
    n = 2 * d
    A = np.zeros((n, n))
    for i in range(n):
        A[i, i] = 2.0 * Q[i]
    for (i, j), idx in pair_idx.items():
        A[i, j] = A[j, i] = Q[idx] - Q[i] - Q[j]
    A = 0.5 * (A + A.T)
    if check:
        lo = np.linalg.eigvalsh(A).min()
        scale = max(1.0, float(np.linalg.norm(A, 2)))
        if lo < -psd_tol * scale:
            raise ValueError(f"coarse matrix not PSD: min eig {lo:.3e}")
    return CoarseGrainedMatrices.from_A(A, cube)


def coarse_grain_adjoint(field: CoefficientField, cube: TriadicCube | None = None,
                         resolution: int = 1) -> CoarseGrainedMatrices:
    """Coarse-grain the transposed coefficient a^T = s - k."""
    flipped = CoefficientField(dim=field.dim, level=field.level,
                               s_cells=field.s_cells, k_cells=-field.k_cells,
                               kind=field.kind, seed=field.seed,
                               params=dict(field.params), extension=field.extension)
    return coarse_grain_cube(flipped, cube, resolution)


def _require_skew(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, float)
    if not np.allclose(h, -h.T, atol=1e-12 * max(1.0, np.abs(h).max())):
        raise ValueError("h must be skew-symmetric")
    return h


def center_skew(field: CoefficientField, h: np.ndarray) -> CoefficientField:
    """Subtract a constant skew matrix h from the coefficient, cell by cell."""
    h = _require_skew(h)
    return CoefficientField(dim=field.dim, level=field.level,
                            s_cells=field.s_cells, k_cells=field.k_cells - h,
                            kind=field.kind, seed=field.seed,
                            params={**field.params, "centered_by": h.tolist()},
                            extension=field.extension)


def center_skew_transform(A: np.ndarray, dim: int, h: np.ndarray | None = None):
    """Exact effect of subtracting a constant skew h on the coarse matrix.

    A spatially constant skew shift maps J(p, q) to J(p, q - h p); on the
    coarse matrix this is the congruence A -> T^T A T with T = [[I, 0],
    [h, I]].  With h omitted, the skew part of the cube's own coupling block
    is used, making the centered coupling symmetric.  Returns (A_centered, h).
    """
    d = dim
    if h is None:
        _, kmat, _, _ = blocks_from_A(A, d)
        h = 0.5 * (kmat - kmat.T)
    h = _require_skew(h)
    T = np.eye(2 * d)
    T[d:, :d] = h
    return T.T @ A @ T, h


def verify_centering(field: CoefficientField, h: np.ndarray,
                     cube: TriadicCube | None = None, resolution: int = 1) -> dict:
    """Coarse-grain before and after a constant skew shift and compare.

    The symmetric blocks must be invariant and the coupling block must shift
    by exactly -h.  Returns the worst absolute deviations.
    """
    cube = cube or field.domain
    cg0 = coarse_grain_cube(field, cube, resolution)
    cg1 = coarse_grain_cube(center_skew(field, h), cube, resolution)
    return {
        "s_star": float(np.abs(cg1.s_star - cg0.s_star).max()),
        "s": float(np.abs(cg1.s - cg0.s).max()),
        "b_shifted": float(np.abs(cg1.b - (cg0.b + _b_shift(cg0, h))).max()),
        "k_shift": float(np.abs(cg1.k - (cg0.k - np.asarray(h))).max()),
    }


def _b_shift(cg: CoarseGrainedMatrices, h: np.ndarray) -> np.ndarray:
    """Exact change of b under k -> k - h at fixed s, s_star."""
    k1 = cg.k - np.asarray(h)
    return k1.T @ np.linalg.solve(cg.s_star, k1) - cg.k.T @ np.linalg.solve(cg.s_star, cg.k)


def verify_maximizer_averages(field: CoefficientField, cube: TriadicCube | None = None,
                              pairs=None, resolution: int = 1) -> dict:
    """Check the closed-form mean gradient and mean flux of each maximizer.

    For the optimizer v of J(p, q):
        avg grad v   = -p + s_star^{-1} (q + k p)
        avg a grad v = (I - k^T s_star^{-1}) q - b p
    Returns the worst absolute errors of both identities.
    """
    cube = cube or field.domain
    d = field.dim
    op = assemble(field, cube, resolution)
    cg = coarse_grain_cube(field, cube, resolution, op=op)
    if pairs is None:
        eye = np.eye(d)
        pairs = [(eye[i], np.zeros(d)) for i in range(d)]
        pairs += [(np.zeros(d), eye[i]) for i in range(d)]
        pairs += [(eye[0], eye[-1])]
    _, V = maximize_J_backend(op, pairs)
    sinv = np.linalg.inv(cg.s_star)
    worst_g = worst_f = 0.0
    for c, (p, q) in enumerate(pairs):
        p = np.asarray(p, float)
        q = np.asarray(q, float)
        v = V[:, c]
        g_avg = op.G @ v / op.vol
        f_avg = op.B @ v / op.vol
        g_pred = -p + sinv @ (q + cg.k @ p)
        f_pred = (np.eye(d) - cg.k.T @ sinv) @ q - cg.b @ p
        worst_g = max(worst_g, float(np.abs(g_avg - g_pred).max()))
        worst_f = max(worst_f, float(np.abs(f_avg - f_pred).max()))
    return {"gradient_avg": worst_g, "flux_avg": worst_f}


def verify_quadratic_response(field: CoefficientField, cube: TriadicCube | None = None,
                              p=None, q=None, n_trials: int = 20,
                              rng: np.random.Generator | None = None,
                              resolution: int = 1) -> float:
    """Check that deviations from the maximizer cost exactly quadratic energy.

    For any admissible (a-harmonic, mean-zero) w:
        J(p, q) - F(w) = 1/2 avg (grad v - grad w) . s (grad v - grad w),
    where F is the objective and v its maximizer.  Samples random a-harmonic
    w (plus w = 0 and w = v) and returns the worst relative residual.
    """
    cube = cube or field.domain
    d = field.dim
    rng = rng or np.random.default_rng(0)
    p = np.ones(d) if p is None else np.asarray(p, float)
    q = np.zeros(d) if q is None else np.asarray(q, float)
    op = assemble(field, cube, resolution)
    Jv, V = maximize_J_backend(op, [(p, q)])
    J, v = float(Jv[0]), V[:, 0]
    ell = -op.B.T @ p + op.G.T @ q
    ws = [np.zeros(op.N), v]
    ws += [random_aharmonic(op, rng) for _ in range(n_trials)]
    worst = 0.0
    for w in ws:
        Fw = (-0.5 * w @ (op.S @ w) + ell @ w) / op.vol
        dvw = v - w
        rhs = 0.5 * dvw @ (op.S @ dvw) / op.vol
        worst = max(worst, abs((J - Fw) - rhs) / max(1.0, abs(J)))
    return worst


def verify_cg_inequalities(field: CoefficientField, cube: TriadicCube | None = None,
                           p=None, q=None, n_trials: int = 20,
                           rng: np.random.Generator | None = None,
                           resolution: int = 1) -> dict:
    """Test the coarse-graining inequalities on random a-harmonic functions.

    For each random admissible w, with g = avg grad w, F = avg a grad w and
    e = avg grad w . s grad w:
        g . s_star(U) g  <=  e,
        F . b(U)^{-1} F  <=  e,
        |p.F - q.g|      <=  sqrt(2 J(U,p,q)) sqrt(e),
    and the third holds with equality at the maximizer itself.  Returns the
    worst signed slacks (negative = violation) and the equality residual.
    """
    cube = cube or field.domain
    d = field.dim
    rng = rng or np.random.default_rng(0)
    p = np.ones(d) if p is None else np.asarray(p, float)
    q = np.zeros(d) if q is None else np.asarray(q, float)
    op = assemble(field, cube, resolution)
    cg = coarse_grain_cube(field, cube, resolution, op=op)
    Jv, V = maximize_J_backend(op, [(p, q)])
    J, v = float(Jv[0]), V[:, 0]
    binv = np.linalg.inv(cg.b)
    slack1 = slack2 = slack3 = np.inf
    for w in [v] + [random_aharmonic(op, rng) for _ in range(n_trials)]:
        g = op.G @ w / op.vol
        F = op.B @ w / op.vol
        e = w @ (op.S @ w) / op.vol
        slack1 = min(slack1, e - g @ cg.s_star @ g)
        slack2 = min(slack2, e - F @ binv @ F)
        slack3 = min(slack3, np.sqrt(max(2.0 * J, 0.0) * e) - abs(p @ F - q @ g))
    gv = op.G @ v / op.vol
    Fv = op.B @ v / op.vol
    ev = v @ (op.S @ v) / op.vol
    eq_res = abs(np.sqrt(max(2.0 * J, 0.0) * ev) - abs(p @ Fv - q @ gv))
    return {"dual_lower": float(slack1), "flux_upper": float(slack2),
            "cauchy_schwarz": float(slack3), "maximizer_equality": float(eq_res)}


def verify_loewner_chain(field: CoefficientField, cube: TriadicCube | None = None,
                         resolution: int = 1,
                         cg: CoarseGrainedMatrices | None = None) -> dict:
    """Min eigenvalues of the ordering chain

        (avg s^{-1})^{-1}  <=  s_star(U)  <=  s(U)  <=  b(U)  <=  avg (s + k^T s^{-1} k)

    in the Loewner sense; every entry should be >= 0 up to roundoff.
    """
    cube = cube or field.domain
    if cg is None:
        cg = coarse_grain_cube(field, cube, resolution)
    sl = cube.slices
    s_cells = field.s_cells[sl].reshape(-1, field.dim, field.dim)
    k_cells = field.k_cells[sl].reshape(-1, field.dim, field.dim)
    sinv_avg = np.linalg.inv(s_cells).mean(axis=0)
    b_pt_avg = (s_cells + np.swapaxes(k_cells, -1, -2)
                @ np.linalg.solve(s_cells, k_cells)).mean(axis=0)
    return {
        "harmonic_lower": float(np.linalg.eigvalsh(cg.s_star - np.linalg.inv(sinv_avg)).min()),
        "dual_vs_primal": float(np.linalg.eigvalsh(cg.s - cg.s_star).min()),
        "primal_vs_b": float(np.linalg.eigvalsh(cg.b - cg.s).min()),
        "b_vs_pointwise": float(np.linalg.eigvalsh(b_pt_avg - cg.b).min()),
    }


@dataclass
class HierarchyCache:
    """Coarse matrices of every partition subcube of a triadic domain.

    ``A_by_scale[k]`` has shape (3^(n-k),)*dim + (2d, 2d), indexed by the
    partition position of the scale-k cube relative to the domain corner.
    ``diagnostics`` lists per-cube ordering violations found during a checked
    sweep (empty = all clean).
    """

    dim: int
    top_level: int
    resolution: int
    fingerprint: str
    A_by_scale: dict
    base_offset: tuple = ()
    diagnostics: list = dc_field(default_factory=list)

    def __post_init__(self):
        if not self.base_offset:
            self.base_offset = (0,) * self.dim

    @property
    def scales(self):
        return sorted(self.A_by_scale)

    def A_at(self, k: int, z: tuple) -> np.ndarray:
        idx = tuple((int(o) - b) // 3 ** k for o, b in zip(z, self.base_offset))
        return self.A_by_scale[k][idx]

    def matrices_at(self, k: int, z: tuple) -> CoarseGrainedMatrices:
        cube = TriadicCube(level=k, offset=tuple(int(o) for o in z), dim=self.dim)
        return CoarseGrainedMatrices.from_A(self.A_at(k, z), cube)

    def subadditivity_defect(self) -> float:
        """Most negative eigenvalue of (children average - parent), all scales."""
        worst = np.inf
        d = self.dim
        for k in self.scales[1:]:
            if k - 1 not in self.A_by_scale:
                continue
            kids = self.A_by_scale[k - 1]
            m = self.A_by_scale[k].shape[0]
            shape = []
            for _ in range(d):
                shape.extend([m, 3])
            kids = kids.reshape(shape + [2 * d, 2 * d])
            avg = kids.mean(axis=tuple(2 * ax + 1 for ax in range(d)))
            diff = avg - self.A_by_scale[k]
            worst = min(worst, float(np.linalg.eigvalsh(diff).min()))
        return worst

    def sandwich_defect(self) -> dict:
        """Most negative eigenvalues of the pointwise upper and lower orderings."""
        d = self.dim
        Jsw = jswap(d)
        worst_up = worst_lo = np.inf
        if 0 not in self.A_by_scale:
            raise ValueError("sandwich check needs the cell scale (k_min = 0)")
        cells = self.A_by_scale[0]
        for k in self.scales[1:]:
            m = self.A_by_scale[k].shape[0]
            for idx in np.ndindex(*(m,) * d):
                sl = tuple(slice(3 ** k * i, 3 ** k * (i + 1)) for i in idx)
                blk = cells[sl].reshape(-1, 2 * d, 2 * d)
                avg = blk.mean(axis=0)
                A = self.A_by_scale[k][idx]
                worst_up = min(worst_up, float(np.linalg.eigvalsh(avg - A).min()))
                low = Jsw @ np.linalg.inv(avg) @ Jsw
                worst_lo = min(worst_lo, float(np.linalg.eigvalsh(A - low).min()))
        return {"upper": worst_up, "lower": worst_lo}

    def save(self, path: str) -> None:
        arrays = {f"scale_{k}": v for k, v in self.A_by_scale.items()}
        np.savez_compressed(path, **arrays)
        manifest = {
            "dim": self.dim, "top_level": self.top_level,
            "resolution": self.resolution, "fingerprint": self.fingerprint,
            "base_offset": list(self.base_offset), "scales": self.scales,
            "diagnostics": self.diagnostics, "version": 1,
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path: str) -> "HierarchyCache":
        with open(str(path) + ".json") as fh:
            manifest = json.load(fh)
        if manifest.get("version") != 1:
            raise ValueError("unsupported cache version")
        npz = path if str(path).endswith(".npz") else str(path) + ".npz"
        with np.load(npz) as data:
            A_by_scale = {int(k.split("_")[1]): data[k] for k in data.files}
        return cls(dim=manifest["dim"], top_level=manifest["top_level"],
                   resolution=manifest["resolution"],
                   fingerprint=manifest["fingerprint"], A_by_scale=A_by_scale,
                   base_offset=tuple(manifest["base_offset"]),
                   diagnostics=manifest["diagnostics"])


def hierarchy_sweep(field: CoefficientField, domain: TriadicCube | None = None,
                    k_min: int = 0, resolution: int = 1, check: bool = True,
                    tol: float = 1e-8) -> HierarchyCache:
    """Coarse-grain every partition subcube of the domain, scale by scale.

    With ``check`` the sweep verifies per-parent subadditivity and the
    two-sided pointwise sandwich on every cube as it goes; violations
    beyond ``tol`` are collected in the cache's ``diagnostics`` list (the
    sweep never aborts on them).
    """
    domain = domain or field.domain
    if not field.domain.contains(domain):
        raise ValueError("domain not contained in the field window")
    n, d = domain.level, field.dim
    base = domain.offset
    A_by_scale = {}
    if k_min == 0:
        A_by_scale[0] = pointwise_A_cells(field, domain)
    diagnostics = []
    Jsw = jswap(d)
    for k in range(max(k_min, 1), n + 1):
        m = 3 ** (n - k)
        out = np.empty((m,) * d + (2 * d, 2 * d))
        for idx in np.ndindex(*(m,) * d):
            offset = tuple(b + 3 ** k * i for b, i in zip(base, idx))
            cube = TriadicCube(level=k, offset=offset, dim=d)
            A = coarse_grain_cube(field, cube, resolution).A
            out[idx] = A
            if not check:
                continue
            scale = max(1.0, float(np.linalg.norm(A, 2)))
            if k - 1 in A_by_scale:
                sl = tuple(slice(3 * i, 3 * (i + 1)) for i in idx)
                kid_avg = A_by_scale[k - 1][sl].reshape(-1, 2 * d, 2 * d).mean(axis=0)
                lo = float(np.linalg.eigvalsh(kid_avg - A).min())
                if lo < -tol * scale:
                    diagnostics.append({"cube": [k, list(offset)],
                                        "check": "subadditivity", "min_eig": lo})
            if 0 in A_by_scale:
                sl0 = tuple(slice(3 ** k * i, 3 ** k * (i + 1)) for i in idx)
                pt_avg = A_by_scale[0][sl0].reshape(-1, 2 * d, 2 * d).mean(axis=0)
                up = float(np.linalg.eigvalsh(pt_avg - A).min())
                low = float(np.linalg.eigvalsh(
                    A - Jsw @ np.linalg.inv(pt_avg) @ Jsw).min())
                if up < -tol * scale:
                    diagnostics.append({"cube": [k, list(offset)],
                                        "check": "sandwich_upper", "min_eig": up})
                if low < -tol * scale:
                    diagnostics.append({"cube": [k, list(offset)],
                                        "check": "sandwich_lower", "min_eig": low})
        A_by_scale[k] = out
    return HierarchyCache(dim=d, top_level=n, resolution=resolution,
                          fingerprint=field.fingerprint, A_by_scale=A_by_scale,
                          base_offset=base, diagnostics=diagnostics)
