"""Conservative Crank-Nicolson stepping for the wave-operator Schrodinger equation.

One step solves, for all test functions phi of the active space,

    (d2 u^n, phi) + i(dh u^n, phi) + (b grad ub, grad phi) + (V ub, phi)
        + (ftilde(|u^{n+1}|^2, |u^{n-1}|^2) ub, phi) = 0,

with d2 the second difference, dh the centered difference, and
ub = (u^{n+1} + u^{n-1})/2. The averaged nonlinearity makes the discrete
energy an exact invariant; the implicit system is solved by a Picard
iteration that freezes the |u^{n+1}|^2 argument, each sweep reusing one
factorization of the linear part plus iterative refinement for the
nonlinear mass.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FineEvaluation, QuadratureRule, assemble_mass, assemble_stiffness
from .lod import ritz_project

__all__ = [
    "Nonlinearity",
    "f_tilde",
    "DiscreteSpace",
    "SimulationState",
    "StepFailure",
    "TrajectorySummary",
    "SnapshotWriter",
    "starting_step",
    "cn_step",
    "run",
]


class StepFailure(Exception):
    """Implicit solve did not converge; carries the iteration history."""

    def __init__(self, message, history=None, step=None):
        super().__init__(message)
        self.history = history or []
        self.step = step


class Nonlinearity:
    """Power nonlinearity f(s) = sign * s^((p-1)/2) with potential F, F' = f."""

    def __init__(self, p=3, sign=1):
        if not p > 1:
            raise ValueError("exponent p must exceed 1")
        if sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        self.p = float(p)
        self.sign = int(sign)

    def f(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("f expects nonnegative arguments")
        return self.sign * s ** ((self.p - 1) / 2)

    def F(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("F expects nonnegative arguments")
        return self.sign * (2.0 / (self.p + 1)) * s ** ((self.p + 1) / 2)


def _real_matvec(B, x):
    """Dense real matrix times possibly complex vector without upcasting B."""
    if np.iscomplexobj(x):
        return B @ x.real + 1j * (B @ x.imag)
    return B @ x


def f_tilde(x, y, nl):
    """Divided difference (F(x)-F(y))/(x-y), continuously extended at x=y.

    For the cubic case this is just the arithmetic mean of the arguments.
    Inputs must be nonnegative (they are squared moduli).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("f_tilde expects nonnegative arguments")
    if nl.p == 3:
        out = nl.sign * 0.5 * (x + y)
        return out if out.ndim else float(out)
    close = np.abs(x - y) < 1e-12 * np.maximum(1.0, np.maximum(x, y))
    xs = np.where(close, 1.0, x)  # dummy values keep the quotient finite
    ys = np.where(close, 0.0, y)
    quotient = (nl.F(xs) - nl.F(ys)) / (xs - ys)
    out = np.where(close, nl.f(0.5 * (x + y)), quotient)
    return out if out.ndim else float(out)


class DiscreteSpace:
    """Trial space for the stepping: corrected coarse space or plain fine FEM.

    Carries mass, stiffness and potential matrices in the space's own
    coordinates together with the fine-mesh quadrature apparatus used to
    evaluate the nonlinearity pointwise.
    """

    def __init__(self, kind, fine_mesh, M, A_b, M_V, apparatus, interior,
                 basis=None, form=None):
        self.kind = kind
        self.fine_mesh = fine_mesh
        self.M = M
        self.A_b = A_b
        self.M_V = M_V
        self.apparatus = apparatus
        self.interior = interior
        self.basis = basis
        self.form = form
        self.n_dofs = M.shape[0]
        self._steppers = {}
        self._mass_lu = None
        # dense BLAS path for the basis matvecs once localization stops
        # paying for sparsity (saturated patches make the basis dense)
        self._B_dense = None
        if basis is not None:
            B = basis.basis_matrix
            if B.nnz > 0.2 * B.shape[0] * B.shape[1]:
                self._B_dense = np.ascontiguousarray(B.toarray())

    @staticmethod
    def lod(basis, b, V, form=None, quad=None):
        fmesh = basis.refmap.fine_mesh
        quad = quad or QuadratureRule.degree4()
        apparatus = FineEvaluation(fmesh, quad)
        interior = fmesh.interior_nodes
        B = basis.basis_matrix
        Mf = assemble_mass(fmesh)[interior][:, interior]
        Ab = assemble_stiffness(fmesh, b, quad)[interior][:, interior]
        Mv = (assemble_mass(fmesh, V, quad)[interior][:, interior]
              if V is not None else sp.csr_matrix(Mf.shape))
        def proj(X):
            Y = (B.T @ (X @ B)).tocsr()
            return ((Y + Y.T) * 0.5).tocsr()

        return DiscreteSpace("lod", fmesh, proj(Mf), proj(Ab), proj(Mv),
                             apparatus, interior, basis=basis, form=form)

    @staticmethod
    def fine(mesh, b, V, quad=None):
        quad = quad or QuadratureRule.degree4()
        apparatus = FineEvaluation(mesh, quad)
        interior = mesh.interior_nodes
        M = assemble_mass(mesh)[interior][:, interior].tocsr()
        Ab = assemble_stiffness(mesh, b, quad)[interior][:, interior].tocsr()
        Mv = (assemble_mass(mesh, V, quad)[interior][:, interior].tocsr()
              if V is not None else sp.csr_matrix(M.shape))
        return DiscreteSpace("fine", mesh, M, Ab, Mv, apparatus, interior)

    def to_fine(self, coeffs):
        out = np.zeros(self.fine_mesh.n_nodes, dtype=np.result_type(coeffs, float))
        if self.kind != "lod":
            out[self.interior] = coeffs
        elif self._B_dense is not None:
            out[self.interior] = _real_matvec(self._B_dense, coeffs)
        else:
            out[self.interior] = self.basis.basis_matrix @ coeffs
        return out

    def load_to_space(self, load_full):
        v = load_full[self.interior]
        if self.kind != "lod":
            return v
        if self._B_dense is not None:
            return _real_matvec(self._B_dense.T, v)
        return self.basis.basis_matrix.T @ v

    def apply_fine(self, N_full, coeffs):
        """Space-coordinate action of a fine weighted mass matrix."""
        return self.load_to_space(N_full @ self.to_fine(coeffs))

    def m_norm(self, v):
        return float(np.sqrt(abs(np.real(np.vdot(v, self.M @ v)))))

    def max_modulus(self, v):
        return float(np.max(np.abs(self.to_fine(v))))


@dataclass
class SimulationState:
    u_prev: np.ndarray
    u_curr: np.ndarray
    n: int
    tau: float
    energy_trace: list = field(default_factory=list)
    fp_iterations: list = field(default_factory=list)


@dataclass
class TrajectorySummary:
    state: SimulationState
    energy: list
    fp_max: int
    fp_mean: float
    max_modulus: float
    nsteps: int
    tau: float


class _Stepper:
    """Factorizations and constant blocks for one (space, tau) pair."""

    def __init__(self, space, tau):
        M, A = space.M, (space.A_b + space.M_V).tocsr()
        self.A = A
        self.K0 = (M / tau**2 + 1j * M / (2 * tau) + 0.5 * A).tocsr()
        self.lu = spla.splu(self.K0.tocsc().astype(complex))
        self.Ks = (2.0 * M / tau**2 + A).tocsr()
        self.lus = spla.splu(self.Ks.tocsc().astype(complex))
        self.tau = tau


def _stepper(space, tau):
    key = float(tau)
    if key not in space._steppers:
        space._steppers[key] = _Stepper(space, tau)
    return space._steppers[key]


def _refined_solve(lu, matvec, rhs, x0, tol=1e-13, max_sweeps=60):
    """Solve (K + N)(x) = rhs given a factorization of K and the full matvec."""
    x = x0.astype(complex)
    scale = float(np.linalg.norm(rhs))
    if scale == 0.0:
        return np.zeros_like(x)
    for _ in range(max_sweeps):
        r = rhs - matvec(x)
        if float(np.linalg.norm(r)) <= tol * scale:
            return x
        x = x + lu.solve(r)
    raise StepFailure("inner refinement stalled")


def _nonlinear_mass(space, nl, w_fine, other_q):
    if nl is None:
        return None
    ev = space.apparatus
    wq = np.abs(ev.evaluate(w_fine)) ** 2
    return ev.weighted_mass(f_tilde(wq, other_q, nl))


def starting_step(space, u0_fine, u1_fine, tau, nl, tol=1e-11, max_iters=100):
    """Initial pair (u^0, u^1) of the two-level scheme.

    u^0 is the elliptic projection of the initial value (nodal restriction
    in the fine space); the ghost level u^{-1} = u^1 - 2 tau u1 closes the
    first step in u^1 alone, keeping second-order starting accuracy.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if space.kind == "lod":
        u0 = ritz_project(u0_fine, space.basis, space.form).astype(complex)
    else:
        u0 = u0_fine[space.interior].astype(complex)
    # velocity data enters through its L2-projection onto the space
    rhs = space.load_to_space(assemble_mass(space.fine_mesh) @ u1_fine)
    if space._mass_lu is None:
        space._mass_lu = spla.splu(space.M.tocsc().astype(complex))
    w1 = space._mass_lu.solve(rhs.astype(complex))

    st = _stepper(space, tau)
    ev = space.apparatus
    rhs_lin = (2.0 / tau**2) * (space.M @ (u0 + tau * w1)) - 1j * (space.M @ w1) \
        + tau * (st.A @ w1)
    w1_fine = space.to_fine(w1)
    w = u0 + tau * w1
    history = []
    for k in range(max_iters):
        w_fine = space.to_fine(w)
        ghost_q = np.abs(ev.evaluate(w_fine - 2 * tau * w1_fine)) ** 2
        N = _nonlinear_mass(space, nl, w_fine, ghost_q)
        if N is None:
            rhs_k = rhs_lin
            matvec = lambda x: st.Ks @ x
        else:
            rhs_k = rhs_lin + tau * space.load_to_space(N @ w1_fine)
            matvec = lambda x: st.Ks @ x + space.apply_fine(N, x)
        u = _refined_solve(st.lus, matvec, rhs_k, w)
        if not np.all(np.isfinite(u)):
            raise StepFailure("non-finite values in starting step", history)
        diff = space.m_norm(u - w)
        nrm = space.m_norm(u)
        history.append(diff / max(nrm, 1e-300))
        w = u
        if diff <= tol * max(nrm, 1e-300) or (nrm == 0.0 and diff == 0.0):
            break
    else:
        raise StepFailure("starting step did not converge", history)
    state = SimulationState(u_prev=u0, u_curr=w, n=1, tau=tau)
    state.fp_iterations.append(len(history))
    state.w1 = w1
    return state


def cn_step(state, space, nl, opts=None):
    """Advance one step; accepts negative tau (the stencil is reversible)."""
    opts = opts or {}
    tol = opts.get("tol", 1e-11)
    max_iters = opts.get("max_iters", 100)
    tau = state.tau
    st = _stepper(space, tau)
    ev = space.apparatus
    up, uc = state.u_prev, state.u_curr
    Mup = space.M @ up
    rhs_lin = (2.0 / tau**2) * (space.M @ uc) - Mup / tau**2 \
        + (1j / (2 * tau)) * Mup - 0.5 * (st.A @ up)
    up_fine = space.to_fine(up)
    up_q = np.abs(ev.evaluate(up_fine)) ** 2
    w = 2.0 * uc - up
    history = []
    for k in range(max_iters):
        N = _nonlinear_mass(space, nl, space.to_fine(w), up_q)
        if N is None:
            rhs_k = rhs_lin
            matvec = lambda x: st.K0 @ x
        else:
            rhs_k = rhs_lin - 0.5 * space.load_to_space(N @ up_fine)
            matvec = lambda x: st.K0 @ x + 0.5 * space.apply_fine(N, x)
        u = _refined_solve(st.lu, matvec, rhs_k, w)
        if not np.all(np.isfinite(u)):
            raise StepFailure("non-finite values in step", history, step=state.n)
        diff = space.m_norm(u - w)
        nrm = space.m_norm(u)
        history.append(diff / max(nrm, 1e-300))
        w = u
        if diff <= tol * max(nrm, 1e-300) or (nrm == 0.0 and diff == 0.0):
            break
    else:
        raise StepFailure(f"step {state.n} did not converge", history, step=state.n)
    new = SimulationState(u_prev=uc, u_curr=w, n=state.n + 1, tau=tau,
                          energy_trace=state.energy_trace,
                          fp_iterations=state.fp_iterations)
    new.fp_iterations.append(len(history))
    return new


class SnapshotWriter:
    """Hook dumping each level as a binary record plus a JSON manifest."""

    def __init__(self, directory):
        from pathlib import Path
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.records = []

    def __call__(self, n, t, state, space):
        name = f"step{n:05d}.npy"
        np.save(self.dir / name, space.to_fine(state.u_curr))
        self.records.append({"step": n, "time": t, "file": name})

    def finish(self):
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump({"format": 1, "records": self.records}, fh, indent=1)


def run(problem, space, tau, T, nl=None, hooks=None, tol=1e-11, max_iters=100,
        record_energy=True):
    """Integrate from 0 to T; T/tau must be an integer up to 1e-12.

    Returns the trajectory summary with the energy trace (one record per
    step pair), Picard iteration statistics and the peak nodal modulus.
    """
    from .energy import discrete_energy

    ratio = T / tau
    nsteps = round(ratio)
    if nsteps < 1 or abs(ratio - nsteps) > 1e-12 * max(1.0, abs(ratio)):
        raise ValueError(f"T/tau = {ratio!r} is not an integer step count")
    if nl is None and problem is not None:
        nl = getattr(problem, "nonlinearity", None)
    fmesh = space.fine_mesh
    xs, ys = fmesh.nodes[:, 0], fmesh.nodes[:, 1]
    u0_fine = np.asarray(problem.u0(xs, ys), dtype=complex)
    u1_fine = np.asarray(problem.u1(xs, ys), dtype=complex)
    state = starting_step(space, u0_fine, u1_fine, tau, nl, tol=tol, max_iters=max_iters)
    hooks = hooks or []

    energy = []
    max_mod = max(space.max_modulus(state.u_prev), space.max_modulus(state.u_curr))
    if record_energy:
        ghost = state.u_curr - 2 * tau * state.w1
        energy.append(discrete_energy(ghost, state.u_prev, state.u_curr, space, nl, tau))
    for h in hooks:
        h(1, tau, state, space)
    opts = {"tol": tol, "max_iters": max_iters}
    for n in range(1, nsteps):
        prev = state.u_prev
        state = cn_step(state, space, nl, opts)
        max_mod = max(max_mod, space.max_modulus(state.u_curr))
        if record_energy:
            energy.append(discrete_energy(prev, state.u_prev, state.u_curr,
                                          space, nl, tau))
        for h in hooks:
            h(state.n, state.n * tau, state, space)
    for h in hooks:
        if hasattr(h, "finish"):
            h.finish()
    if energy:
        e0 = energy[0].E
        for i, rec in enumerate(energy):
            rec.n = i
            rec.t = i * tau
            rec.drift = rec.E - e0
    iters = state.fp_iterations
    return TrajectorySummary(state=state, energy=energy, fp_max=int(max(iters)),
                             fp_mean=float(np.mean(iters)), max_modulus=max_mod,
                             nsteps=nsteps, tau=tau)
