"""Independent reference computations used as test oracles.

Nothing here imports the simulator: each function re-derives its result
from the circuit equations with a different numerical route.
"""

import math

import numpy as np
from scipy.integrate import solve_ivp

KAPPA, U_T, I_0 = 0.7, 0.025, 0.5e-12


def tau(C, I_tau, kappa=KAPPA, ut=U_T):
    return C * ut / (kappa * I_tau)


def synapse_closed_form(I_g, I_tau, I_w, C, drive, dt, i_start=I_0, floor=I_0):
    """Exact solution of ``tau dI/dt = -I + (I_g/I_tau) I_w u(t)`` with a dark-current
    floor, for a drive ``u`` held constant over each step.

    Runs of equal drive are merged and solved from their start, so the value
    at step ``k`` is ``I_ss + (I_s - I_ss) exp(-(k - s) dt / tau)`` rather than
    a product of per-step decays.
    """
    t_c = tau(C, I_tau)
    out = np.empty(len(drive))
    level = i_start
    s = 0
    while s < len(drive):
        e = s
        while e + 1 < len(drive) and drive[e + 1] == drive[s]:
            e += 1
        i_ss = I_g / I_tau * I_w * drive[s]
        for k in range(s, e + 1):
            v = i_ss + (level - i_ss) * math.exp(-(k - s + 1) * dt / t_c)
            out[k] = max(v, floor)
        level = out[e]
        s = e + 1
    return out


def neuron_rhs(I, I_tau, I_g, I_in, C, alpha=2e10, I_g_fb=500e-12, I_ahp=I_0):
    """dI_mem/dt of the membrane equation with positive feedback."""
    t_c = tau(C, I_tau)
    i_inf = I_g / I_tau * (I_in - I_ahp - I_tau)
    i_fb = I_0 ** (1 / (KAPPA + 1)) * I ** (KAPPA / (KAPPA + 1)) / (1 + math.exp(-alpha * (I - I_g_fb)))
    f = i_fb / I_tau * (I - I_g_fb)
    return (i_inf + f - I * (1 + I_ahp / I_tau)) / (t_c * (1 + I_g / I))


def neuron_reference(I_tau, I_g, I_in, C, threshold, t_max=5.0, **kw):
    """High-accuracy solution from rest up to the first threshold crossing.

    Returns ``(dense solution, first crossing time or None)``.
    """
    def crossing(t, y):
        return y[0] - threshold
    crossing.terminal = True
    sol = solve_ivp(lambda t, y: [neuron_rhs(y[0], I_tau, I_g, I_in, C, **kw)], (0.0, t_max), [I_0],
                    method="LSODA", rtol=1e-11, atol=1e-22, dense_output=True, events=crossing)
    t_hit = sol.t_events[0][0] if len(sol.t_events[0]) else None
    return sol.sol, t_hit


def brute_force_integer_regression(X, y, w_max):
    """Integer weights in ``[0, w_max]^d`` minimizing ``||X w - y||^2`` (exhaustive)."""
    d = X.shape[1]
    grids = np.stack(np.meshgrid(*[np.arange(w_max + 1)] * d, indexing="ij"), -1).reshape(-1, d)
    err = ((grids @ X.T - y) ** 2).sum(axis=1)
    best = int(np.argmin(err))
    return grids[best], float(err[best]), np.sort(err)
