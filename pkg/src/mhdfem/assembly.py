"""Quadrature tables and element assembly for every form in the solvers.

All integrands arising from the lowest-order spaces with P2 coefficient
fields are polynomial, and the rules are chosen to integrate them exactly:
a degree-4 tet rule for constant-coefficient forms, a degree-6 rule for
forms carrying FE coefficient fields (the convection form and the cross
products against a magnetic field).  Exact integration is what turns the
structural statements (skew-symmetry, adjointness, incidence identities)
into machine-precision matrix facts rather than approximations.

Matrix layout convention: assemble(form, trial, test) returns the matrix
M[i, j] = form(trial_j, test_i), i.e. rows run over test DOFs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .derham import (
    FeSpace,
    curl_incidence,
    div_incidence,
    p1_values,
    p2_values,
    tabulate_nedelec,
    tabulate_p2_gradients,
    tabulate_rt,
)
from .linalg import AssemblyError, BlockSystem, SparseMatrix, finalize_assembly

# ---------------------------------------------------------------------------
# quadrature
#
# The 11-point tet rule is exact through degree 4 with all-positive weights;
# weights sum to the reference volume 1/6.  Verified against the monomial
# moments a!b!c!/(a+b+c+3)!.

_TET4 = np.array([
    (0.44204369537695565, 0.11007376783791513, 0.10577547000968035, 0.024018746373476983),
    (0.36981062614058663, 0.10115200829485037, 0.47741621913400617, 0.016395975018442723),
    (0.08195043518763263, 0.7857641195232954, 0.07727120054273312, 0.007375961222335013),
    (0.020067959522003152, 0.14217646446206764, 0.26234842680647713, 0.010766750424420652),
    (0.17972961657353304, 0.06544061748336333, 0.4092331254405425, 0.019745602433285634),
    (0.03273582089367767, 0.08195117847949455, 0.7869153205797601, 0.0071131073451761685),
    (0.09711939553031529, 0.403415993675296, 0.38889645777638676, 0.024980726731268013),
    (0.11095035197059509, 0.4450387340269152, 0.0750889630562039, 0.02121406158933875),
    (0.7793281849378222, 0.05298330373751188, 0.09962738457355212, 0.007489771988893313),
    (0.13274635076506328, 0.07286875566378248, 0.03437862772623808, 0.007710714143930963),
    (0.4403516742009084, 0.38706660645444335, 0.09602915027786478, 0.019855249396098458),
])


def _tet6_rule():
    # symmetric 24-point rule, exact through degree 6
    pts, wts = [], []
    for a, w in ((0.214602871259152, 0.0399227502581679),
                 (0.0406739585346113, 0.0100772110553207),
                 (0.322337890142275, 0.0553571815436544)):
        base = (a, a, a, 1.0 - 3.0 * a)
        for p in sorted(set(itertools.permutations(base))):
            pts.append(p)
            wts.append(w)
    a, b = 0.0636610018750175, 0.269672331458316
    base = (a, a, b, 1.0 - 2.0 * a - b)
    for p in sorted(set(itertools.permutations(base))):
        pts.append(p)
        wts.append(27.0 / 560.0)
    bary = np.array(pts)
    return bary[:, 1:], np.array(wts) / 6.0


def _tri5_rule():
    # 7-point degree-5 rule in barycentric coordinates, weights sum to 1/2
    a = (6.0 - np.sqrt(15.0)) / 21.0
    b = (6.0 + np.sqrt(15.0)) / 21.0
    wa = (155.0 - np.sqrt(15.0)) / 1200.0
    wb = (155.0 + np.sqrt(15.0)) / 1200.0
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    wts = [9.0 / 40.0]
    for c, w in ((a, wa), (b, wb)):
        base = (c, c, 1.0 - 2.0 * c)
        for p in sorted(set(itertools.permutations(base))):
            pts.append(p)
            wts.append(w)
    return np.array(pts), np.array(wts) / 2.0


def _edge_rule():
    x, w = leggauss(4)
    return (x + 1.0) / 2.0, w / 2.0


@dataclass(frozen=True)
class QuadratureRule:
    """Tet rule plus the lower-dimensional rules used by DOF functionals."""

    tet_points: np.ndarray    # (nq, 3) reference coordinates
    tet_weights: np.ndarray   # sum = 1/6
    tri_points: np.ndarray    # (7, 3) barycentric
    tri_weights: np.ndarray   # sum = 1/2
    edge_points: np.ndarray   # (4,) on [0, 1]
    edge_weights: np.ndarray  # sum = 1


_TRI_P, _TRI_W = _tri5_rule()
_EDGE_P, _EDGE_W = _edge_rule()
_TET6_P, _TET6_W = _tet6_rule()

RULE_DEG4 = QuadratureRule(_TET4[:, :3].copy(), _TET4[:, 3].copy(),
                           _TRI_P, _TRI_W, _EDGE_P, _EDGE_W)
RULE_DEG6 = QuadratureRule(_TET6_P, _TET6_W, _TRI_P, _TRI_W, _EDGE_P, _EDGE_W)

# rules backing the canonical DOF functionals (interpolation)
DOF_TET_RULE = (np.column_stack([1.0 - _TET4[:, :3].sum(axis=1), _TET4[:, :3]]),
                _TET4[:, 3].copy())
DOF_TRI_RULE = (_TRI_P, _TRI_W)
DOF_EDGE_RULE = (_EDGE_P, _EDGE_W)


def _bary(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.column_stack([1.0 - points.sum(axis=1), points])


# ---------------------------------------------------------------------------
# forms

_TAGS = ("VectorLaplacian", "Mass", "MixedDiv", "CurlPairing",
         "Convection", "CrossCoupling")


@dataclass(frozen=True, eq=False)
class FormKind:
    """Weak-form tag plus the coefficient field it closes over.

    coeff holds velocity coefficients for Convection and face-element
    (magnetic) coefficients for CrossCoupling; unused otherwise.
    """

    tag: str
    coeff: np.ndarray | None = None

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise AssemblyError(f"unknown form tag {self.tag!r}")


_SHORT = {("P1", 1): "P1", ("P2", 1): "P2", ("P2", 3): "velocity",
          ("NedelecEdge0", 1): "edge", ("RaviartThomas0", 1): "face",
          ("DG0", 1): "cell", ("DG1", 1): "DG1"}


def _check_pair(form: FormKind, trial: FeSpace, test: FeSpace, pairs) -> str:
    if trial.mesh is not test.mesh:
        raise AssemblyError("trial and test spaces live on different meshes")
    tagpair = (_SHORT[(trial.kind.tag, trial.kind.components)],
               _SHORT[(test.kind.tag, test.kind.components)])
    if tagpair not in pairs:
        raise AssemblyError(
            f"form {form.tag} does not accept trial={tagpair[0]}, test={tagpair[1]}")
    return "-".join(tagpair)


def _tet_weights(mesh, rule: QuadratureRule) -> np.ndarray:
    # reference weights sum to 1/6; |detJ| = 6 * volume
    return (6.0 * mesh.volumes)[:, None] * rule.tet_weights[None, :]


def _p2_dofs(space: FeSpace) -> np.ndarray:
    mesh = space.mesh
    return np.concatenate([mesh.tets, mesh.num_vertices + mesh.tet_edges], axis=1)


def _triplets_from_elements(rows, cols, elem) -> tuple:
    return rows.ravel(), cols.ravel(), elem.ravel()


def _velocity_field_at(space: FeSpace, coeff, vals) -> np.ndarray:
    """Evaluate a velocity FE function at tabulated points, (T, nq, 3)."""
    coeff = np.asarray(coeff, dtype=float)
    if coeff.shape != (space.dof_count,):
        raise AssemblyError("velocity coefficient vector has wrong length")
    gd = _p2_dofs(space)
    out = np.empty((space.mesh.num_tets, vals.shape[0], 3))
    for c in range(3):
        out[:, :, c] = np.einsum("qi,ti->tq", vals, coeff[c * space.n_scalar + gd])
    return out


def _face_field_at(space: FeSpace, coeff, rt_vals) -> np.ndarray:
    """Evaluate a face-element FE function at tabulated points, (T, nq, 3)."""
    coeff = np.asarray(coeff, dtype=float)
    if coeff.shape != (space.dof_count,):
        raise AssemblyError("face-element coefficient vector has wrong length")
    return np.einsum("tqfk,tf->tqk", rt_vals, coeff[space.mesh.tet_faces])


def assemble(form: FormKind, trial: FeSpace, test: FeSpace) -> SparseMatrix:
    """Assemble the global matrix of a weak form, rows over test DOFs.

    Divergence pairings against piecewise constants and the curl pairings
    reduce to the integer incidence matrices composed with mass matrices;
    they are assembled that way, which is the exact integral.
    """
    mesh = trial.mesh
    tag = form.tag

    if tag == "VectorLaplacian":
        _check_pair(form, trial, test, [("velocity", "velocity")])
        rule = RULE_DEG4
        lam = _bary(rule.tet_points)
        grads = tabulate_p2_gradients(mesh, lam)
        wq = _tet_weights(mesh, rule)
        elem = np.einsum("tq,tqik,tqjk->tij", wq, grads, grads)
        return _stack_components(trial, test, elem, 3)

    if tag == "Mass":
        return _assemble_mass(form, trial, test)

    if tag == "MixedDiv":
        kind = _check_pair(form, trial, test, [
            ("velocity", "P1"), ("P1", "velocity"),
            ("face", "cell"), ("cell", "face")])
        if kind == "face-cell":
            return SparseMatrix(div_incidence(mesh))
        if kind == "cell-face":
            return SparseMatrix(div_incidence(mesh).T)
        if kind == "velocity-P1":
            return _div_velocity_p1(trial, test)
        return SparseMatrix(_div_velocity_p1(test, trial).T)

    if tag == "CurlPairing":
        kind = _check_pair(form, trial, test, [("edge", "face"), ("face", "edge")])
        rt = trial if kind == "face-edge" else test
        m_d = _assemble_mass(FormKind("Mass"), rt, rt)
        k_cd = SparseMatrix(m_d @ curl_incidence(mesh))
        return SparseMatrix(k_cd.T) if kind == "face-edge" else k_cd

    if tag == "Convection":
        _check_pair(form, trial, test, [("velocity", "velocity")])
        if form.coeff is None:
            raise AssemblyError("Convection needs a velocity coefficient field")
        rule = RULE_DEG6
        lam = _bary(rule.tet_points)
        vals = p2_values(lam)
        grads = tabulate_p2_gradients(mesh, lam)
        wq = _tet_weights(mesh, rule)
        w_at = _velocity_field_at(trial, form.coeff, vals)
        wgrad = np.einsum("tqc,tqjc->tqj", w_at, grads)
        adv = np.einsum("tq,qi,tqj->tij", wq, vals, wgrad)
        elem = 0.5 * (adv - adv.transpose(0, 2, 1))
        return _stack_components(trial, test, elem, 3)

    if tag == "CrossCoupling":
        return _assemble_cross(form, trial, test)

    raise AssemblyError(f"unknown form tag {tag!r}")


def _stack_components(trial: FeSpace, test: FeSpace, elem, ncomp) -> SparseMatrix:
    """Scatter one scalar element block (rows = test index i) into ncomp
    diagonal components."""
    gd_t = _p2_dofs(trial)
    gd_s = _p2_dofs(test)
    rows, cols, vals = [], [], []
    for c in range(ncomp):
        rows.append(np.broadcast_to((c * test.n_scalar + gd_s)[:, :, None],
                                    elem.shape).ravel())
        cols.append(np.broadcast_to((c * trial.n_scalar + gd_t)[:, None, :],
                                    elem.shape).ravel())
        vals.append(elem.ravel())
    return finalize_assembly(np.concatenate(rows), np.concatenate(cols),
                             np.concatenate(vals),
                             (test.dof_count, trial.dof_count))


def _assemble_mass(form: FormKind, trial: FeSpace, test: FeSpace) -> SparseMatrix:
    kind = _check_pair(form, trial, test, [
        ("velocity", "velocity"), ("P2", "P2"), ("P1", "P1"),
        ("edge", "edge"), ("face", "face"), ("cell", "cell")])
    mesh = trial.mesh
    rule = RULE_DEG4
    lam = _bary(rule.tet_points)
    wq = _tet_weights(mesh, rule)

    if kind == "cell-cell":
        n = mesh.num_tets
        return finalize_assembly(np.arange(n), np.arange(n), mesh.volumes, (n, n))
    if kind in ("velocity-velocity", "P2-P2"):
        vals = p2_values(lam)
        elem = np.einsum("tq,qi,qj->tij", wq, vals, vals)
        if kind == "P2-P2":
            gd = _p2_dofs(trial)
            return finalize_assembly(
                *_triplets_from_elements(
                    np.broadcast_to(gd[:, :, None], elem.shape),
                    np.broadcast_to(gd[:, None, :], elem.shape), elem),
                (test.dof_count, trial.dof_count))
        return _stack_components(trial, test, elem, 3)
    if kind == "P1-P1":
        vals = p1_values(lam)
        elem = np.einsum("tq,qi,qj->tij", wq, vals, vals)
        gd = mesh.tets
        return finalize_assembly(
            *_triplets_from_elements(
                np.broadcast_to(gd[:, :, None], elem.shape),
                np.broadcast_to(gd[:, None, :], elem.shape), elem),
            (test.dof_count, trial.dof_count))
    if kind == "edge-edge":
        vals, _ = tabulate_nedelec(mesh, lam)
        gd = mesh.tet_edges
    else:
        vals, _ = tabulate_rt(mesh, lam)
        gd = mesh.tet_faces
    elem = np.einsum("tq,tqik,tqjk->tij", wq, vals, vals)
    return finalize_assembly(
        *_triplets_from_elements(
            np.broadcast_to(gd[:, :, None], elem.shape),
            np.broadcast_to(gd[:, None, :], elem.shape), elem),
        (test.dof_count, trial.dof_count))


def _div_velocity_p1(vel: FeSpace, p1: FeSpace) -> SparseMatrix:
    """Matrix of (div u, q): rows P1 test, cols velocity trial."""
    mesh = vel.mesh
    rule = RULE_DEG4
    lam = _bary(rule.tet_points)
    grads = tabulate_p2_gradients(mesh, lam)
    wq = _tet_weights(mesh, rule)
    gd_u = _p2_dofs(vel)
    rows, cols, vals = [], [], []
    for c in range(3):
        elem = np.einsum("tq,qi,tqj->tij", wq, p1_values(lam), grads[:, :, :, c])
        rows.append(np.broadcast_to(mesh.tets[:, :, None], elem.shape).ravel())
        cols.append(np.broadcast_to((c * vel.n_scalar + gd_u)[:, None, :],
                                    elem.shape).ravel())
        vals.append(elem.ravel())
    return finalize_assembly(np.concatenate(rows), np.concatenate(cols),
                             np.concatenate(vals), (p1.dof_count, vel.dof_count))


def _assemble_cross(form: FormKind, trial: FeSpace, test: FeSpace) -> SparseMatrix:
    """Cross-product couplings against a face-element field G.

    velocity trial, edge test:   M[i,j] = ((phi_j x G), w_i)
    edge trial, velocity test:   M[i,j] = ((phi_i x G), w_j)   (the transpose)
    velocity trial and test:     M[i,j] = ((phi_j x G), (phi_i x G))
    """
    kind = _check_pair(form, trial, test, [
        ("velocity", "edge"), ("edge", "velocity"), ("velocity", "velocity")])
    if form.coeff is None:
        raise AssemblyError("CrossCoupling needs a face-element coefficient field")
    mesh = trial.mesh
    vel = trial if trial.kind.components == 3 else test
    # the double-cross integrand has two G factors, degree 6; single cross is 4
    rule = RULE_DEG6 if kind == "velocity-velocity" else RULE_DEG4
    lam = _bary(rule.tet_points)
    wq = _tet_weights(mesh, rule)
    vals = p2_values(lam)
    rt_vals, _ = tabulate_rt(mesh, lam)
    g_at = np.einsum("tqfk,tf->tqk", rt_vals,
                     np.asarray(form.coeff, float)[mesh.tet_faces])
    # (e_c x G) at each quadrature point for the three unit vectors
    basis_cross = np.cross(np.eye(3)[None, None, :, :], g_at[:, :, None, :])

    gd_u = _p2_dofs(vel)
    n = vel.n_scalar
    if kind == "velocity-velocity":
        cc = np.einsum("tqck,tqdk->tqcd", basis_cross, basis_cross)
        elem = np.einsum("tq,qi,qj,tqcd->tcidj", wq, vals, vals, cc)
        rows = np.broadcast_to((np.arange(3) * n)[None, :, None, None, None]
                               + gd_u[:, None, :, None, None], elem.shape)
        cols = np.broadcast_to((np.arange(3) * n)[None, None, None, :, None]
                               + gd_u[:, None, None, None, :], elem.shape)
        return finalize_assembly(rows.ravel(), cols.ravel(), elem.ravel(),
                                 (test.dof_count, trial.dof_count))

    ned_vals, _ = tabulate_nedelec(mesh, lam)
    elem = np.einsum("tq,qi,tqck,tqjk->tcij", wq, vals, basis_cross, ned_vals)
    rows_u = np.broadcast_to(
        gd_u[:, None, :, None] + (np.arange(3) * n)[None, :, None, None], elem.shape)
    cols_e = np.broadcast_to(mesh.tet_edges[:, None, None, :], elem.shape)
    if kind == "velocity-edge":
        return finalize_assembly(cols_e.ravel(), rows_u.ravel(), elem.ravel(),
                                 (test.dof_count, trial.dof_count))
    return finalize_assembly(rows_u.ravel(), cols_e.ravel(), elem.ravel(),
                             (test.dof_count, trial.dof_count))


def assemble_load(space: FeSpace, field, rule: QuadratureRule = RULE_DEG6) -> np.ndarray:
    """Load vector (field, phi_i) by tet quadrature on an analytic field."""
    mesh = space.mesh
    lam = _bary(rule.tet_points)
    wq = _tet_weights(mesh, rule)
    pts = np.einsum("qi,tik->tqk", lam, mesh.vertices[mesh.tets])
    f = np.asarray(field(pts.reshape(-1, 3)), dtype=float)
    tag = space.kind.tag

    if tag in ("P1", "P2") and space.kind.components == 1:
        f = f.reshape(mesh.num_tets, -1)
        vals = p1_values(lam) if tag == "P1" else p2_values(lam)
        gd = mesh.tets if tag == "P1" else _p2_dofs(space)
        elem = np.einsum("tq,tq,qi->ti", wq, f, vals)
        out = np.zeros(space.dof_count)
        np.add.at(out, gd.ravel(), elem.ravel())
        return out
    if tag == "P2" and space.kind.components == 3:
        f = f.reshape(mesh.num_tets, -1, 3)
        vals = p2_values(lam)
        gd = _p2_dofs(space)
        out = np.zeros(space.dof_count)
        for c in range(3):
            elem = np.einsum("tq,tq,qi->ti", wq, f[:, :, c], vals)
            np.add.at(out, (c * space.n_scalar + gd).ravel(), elem.ravel())
        return out
    if tag == "NedelecEdge0":
        f = f.reshape(mesh.num_tets, -1, 3)
        vals, _ = tabulate_nedelec(mesh, lam)
        elem = np.einsum("tq,tqk,tqik->ti", wq, f, vals)
        out = np.zeros(space.dof_count)
        np.add.at(out, mesh.tet_edges.ravel(), elem.ravel())
        return out
    if tag == "RaviartThomas0":
        f = f.reshape(mesh.num_tets, -1, 3)
        vals, _ = tabulate_rt(mesh, lam)
        elem = np.einsum("tq,tqk,tqik->ti", wq, f, vals)
        out = np.zeros(space.dof_count)
        np.add.at(out, mesh.tet_faces.ravel(), elem.ravel())
        return out
    if tag == "DG0":
        f = f.reshape(mesh.num_tets, -1)
        return np.einsum("tq,tq->t", wq, f)
    raise AssemblyError(f"cannot build a load vector for {tag!r}")


def apply_essential_bc(system: BlockSystem, masks: dict) -> BlockSystem:
    """Restrict a block system to free DOFs (homogeneous essential BCs).

    masks maps space names to boolean constrained-DOF masks; spaces without
    a mask keep all DOFs.  Rows and columns are deleted symmetrically; with
    homogeneous data the RHS needs no lift.
    """
    free = {}
    reduced_spaces = []
    for name, dim in system.spaces:
        mask = masks.get(name)
        if mask is None:
            idx = np.arange(dim)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.size != dim:
                raise AssemblyError(
                    f"mask for {name!r} has length {mask.size}, expected {dim}")
            idx = np.flatnonzero(~mask)
        free[name] = idx
        reduced_spaces.append((name, idx.size))

    out = BlockSystem(reduced_spaces)
    for rname, cname, mat in system._blocks:
        out.add_block(rname, cname, mat[free[rname]][:, free[cname]])
    for name, vec in system._rhs.items():
        out.set_rhs(name, vec[free[name]])
    return out
