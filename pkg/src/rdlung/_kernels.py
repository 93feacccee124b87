"""Tree-ordered direct elimination of the linearized step system.

Every subtree is reduced, leaves first, to affine expressions of its inlet
pressure and the total unit volume Vt (the only non-local unknown, through
the chest-wall recoil). The root inlet pressure is prescribed, which fixes
Vt, and a top-down sweep recovers all unknowns. No fill-in occurs.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def eliminate(order, parent, child0, child1, unit_of, axis_unit,
              C, Rv, R, I,
              p_old, pup_old, qi_old, qo_old, pext_old,
              pa_star, g_unit, v_star, v_old, trapped, h, vt_star,
              theta, dt, p_ao,
              p, qi, qo, v_new):
    """Solve one Newton linearization in place.

    Returns (Vt, status) where status is -1 on success or the id of the
    airway whose local 2x2 block was singular.
    """
    n = order.shape[0]
    # affine coefficients (constant, inlet pressure, Vt)
    A0 = np.empty(n); Ap = np.empty(n); Av = np.empty(n)        # q_in
    P0 = np.empty(n); Pp = np.empty(n); Pv = np.empty(n)        # p (distal)
    X0 = np.empty(n); Xp = np.empty(n); Xv = np.empty(n)        # axis unit volume
    S0 = np.empty(n); Sp = np.empty(n); Sv = np.empty(n)        # subtree volume sum
    QOa = np.empty(n); QOb = np.empty(n); QOg = np.empty(n)     # q_out in (p, Vt)
    inv_tdt = 1.0 / (theta * dt)

    for k in range(n - 1, -1, -1):
        e = order[k]
        c0 = child0[e]
        if c0 < 0:
            u = unit_of[e]
            if trapped[u]:
                qa = 0.0; qb = 0.0; qg = 0.0
                va = v_old[u]; vb = 0.0; vg = 0.0
            else:
                gu = g_unit[u]
                va = v_star[u] - (pa_star[u] - h * vt_star) / gu
                vb = 1.0 / gu
                vg = -h / gu
                qa = (va - v_old[u]) * inv_tdt - (1.0 - theta) / theta * qo_old[e]
                qb = vb * inv_tdt
                qg = vg * inv_tdt
            sa = va; sb = vb; sg = vg
        else:
            c1 = child1[e]
            qa = A0[c0] + A0[c1]; qb = Ap[c0] + Ap[c1]; qg = Av[c0] + Av[c1]
            va = X0[c0]; vb = Xp[c0]; vg = Xv[c0]
            sa = S0[c0] + S0[c1]; sb = Sp[c0] + Sp[c1]; sg = Sv[c0] + Sv[c1]
        QOa[e] = qa; QOb[e] = qb; QOg[e] = qg

        u = axis_unit[e]
        gu = g_unit[u]
        ea = pa_star[u] - gu * v_star[u] - h * vt_star + gu * va
        eb = gu * vb
        eg = gu * vg + h

        c = C[e]
        cdt = c / dt
        cvd = c * Rv[e] / dt
        w = theta + cvd
        m = 0.5 * I[e] / dt + 0.5 * theta * R[e]
        dq_old = qo_old[e] - qi_old[e]
        sq_old = qi_old[e] + qo_old[e]
        k1 = cdt * (0.5 * (pup_old[e] + p_old[e]) - pext_old[e]) - (1.0 - theta) * dq_old + cvd * dq_old
        k2 = 0.5 * I[e] / dt * sq_old - (1.0 - theta) * (0.5 * R[e] * sq_old + p_old[e] - pup_old[e])

        a11 = 0.5 * cdt - cdt * eb + w * qb
        a21 = m * qb + theta
        det = a11 * m + w * a21
        if det == 0.0 or not np.isfinite(det):
            return 0.0, e
        r1c = k1 + cdt * ea - w * qa
        r1p = -0.5 * cdt
        r1v = cdt * eg - w * qg
        r2c = k2 - m * qa
        r2p = theta
        r2v = -m * qg
        inv = 1.0 / det
        P0[e] = (m * r1c + w * r2c) * inv
        Pp[e] = (m * r1p + w * r2p) * inv
        Pv[e] = (m * r1v + w * r2v) * inv
        A0[e] = (a11 * r2c - a21 * r1c) * inv
        Ap[e] = (a11 * r2p - a21 * r1p) * inv
        Av[e] = (a11 * r2v - a21 * r1v) * inv
        X0[e] = va + vb * P0[e]
        Xp[e] = vb * Pp[e]
        Xv[e] = vb * Pv[e] + vg
        S0[e] = sa + sb * P0[e]
        Sp[e] = sb * Pp[e]
        Sv[e] = sb * Pv[e] + sg

    root = order[0]
    denom = 1.0 - Sv[root]
    if denom == 0.0 or not np.isfinite(denom):
        return 0.0, root
    vt = (S0[root] + Sp[root] * p_ao) / denom

    for k in range(n):
        e = order[k]
        pe = parent[e]
        pu = p_ao if pe < 0 else p[pe]
        p[e] = P0[e] + Pp[e] * pu + Pv[e] * vt
        qi[e] = A0[e] + Ap[e] * pu + Av[e] * vt
        qo[e] = QOa[e] + QOb[e] * p[e] + QOg[e] * vt
        if child0[e] < 0:
            u = unit_of[e]
            if trapped[u]:
                v_new[u] = v_old[u]
            else:
                gu = g_unit[u]
                v_new[u] = v_star[u] + (p[e] - pa_star[u] - h * (vt - vt_star)) / gu
    # junction balance recovered exactly rather than through the affine form
    for k in range(n - 1, -1, -1):
        e = order[k]
        c0 = child0[e]
        if c0 >= 0:
            qo[e] = qi[c0] + qi[child1[e]]
    return vt, -1
