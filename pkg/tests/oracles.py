"""Independent reference solutions shared by the test modules."""

import numpy as np

from hetsolve.cg import pcg_solve
from hetsolve.timeloop import CaseState, MatrixBackend, newmark_rhs, newmark_update


def sdof_newmark(omega, zeta, dt, n_steps, u0=1.0, v0=0.0):
    """Unit-mass oscillator integrated with the package's Newmark step and solver."""
    k, c = omega**2, 2.0 * zeta * omega
    backend = MatrixBackend(np.array([[1.0]]), np.array([[c]]), np.array([[k]]), dt)
    st = CaseState.at_rest(1)
    st.u[:] = u0
    st.v[:] = v0
    st.a[:] = -(c * v0 + k * u0)
    u, v = [u0], [v0]
    for _ in range(n_steps):
        st.f = np.zeros(1)
        b = newmark_rhs(st, backend, dt)
        x, rep = pcg_solve(backend.apply_A, backend.precond, b, st.u, eps=1e-14)
        newmark_update(st, x, dt)
        u.append(st.u[0])
        v.append(st.v[0])
    t = dt * np.arange(n_steps + 1)
    u, v = np.array(u), np.array(v)
    energy = 0.5 * v**2 + 0.5 * k * u**2
    return t, u, v, energy


def sdof_exact(omega, zeta, t, u0=1.0):
    """Free response from rest at displacement ``u0`` (underdamped)."""
    wd = omega * np.sqrt(1.0 - zeta**2)
    return np.exp(-zeta * omega * t) * u0 * (np.cos(wd * t) + zeta * omega / wd * np.sin(wd * t))
