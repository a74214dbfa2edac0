"""Compiled log-posterior and gradient.

The joint density is evaluated in one pass over strata with
hand-derived reverse-mode accumulation: derivatives with respect to
each expected count are pushed back to linear predictors, then through
the sparse design onto the flat parameter vector.
"""

import math

import numpy as np
from numba import njit

POISSON, NB, ZIP, ZINB = 0, 1, 2, 3
FAMILY_CODE = {"poisson": POISSON, "nb": NB, "zip": ZIP, "zinb": ZINB}

RMST_SWITCH = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)


@njit(cache=True, error_model="numpy")
def log_sigmoid(z):
    if z >= 0.0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


@njit(cache=True, error_model="numpy")
def sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@njit(cache=True, error_model="numpy")
def log_add_exp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True, error_model="numpy")
def rmst_and_derivative(lam):
    """(1 - exp(-lam)) / lam and its derivative in lam."""
    if lam < RMST_SWITCH:
        return 1.0 - lam / 2.0 + lam * lam / 6.0, -0.5 + lam / 3.0
    em1 = math.expm1(-lam)
    r = -em1 / lam
    dr = (lam * math.exp(-lam) + em1) / (lam * lam)
    return r, dr


@njit(cache=True, error_model="numpy")
def _nb_sums(x, theta):
    # sum_{k<x} log1p(k/theta) = lgamma(x+theta) - lgamma(theta) - x log(theta)
    # sum_{k<x} 1/(theta+k)    = digamma(x+theta) - digamma(theta)
    a = 0.0
    d = 0.0
    for k in range(int(x)):
        a += math.log1p(k / theta)
        d += 1.0 / (theta + k)
    return a, d


@njit(cache=True, error_model="numpy")
def count_term(x, lfact, mu, fam, log_theta, logit_pi):
    """Log-density of a count and its derivatives.

    Returns (ll, d ll/d mu, d ll/d log_theta, d ll/d logit_pi).
    ``lfact`` is lgamma(x + 1).
    """
    d_lt = 0.0
    d_z = 0.0
    if fam == POISSON or fam == ZIP:
        if x == 0.0:
            l_base = -mu
            d_base = -1.0
        else:
            l_base = x * math.log(mu) - mu - lfact
            d_base = x / mu - 1.0
        dth_base = 0.0
    else:
        theta = math.exp(log_theta)
        l1p = math.log1p(mu / theta)
        a, dsum = _nb_sums(x, theta)
        if x == 0.0:
            l_base = -theta * l1p
        else:
            l_base = a - lfact + x * math.log(mu) - (theta + x) * l1p
        d_base = (x / mu if x > 0.0 else 0.0) - (theta + x) / (theta + mu)
        dth_base = theta * (dsum - l1p + (mu - x) / (theta + mu))

    if fam == POISSON or fam == NB:
        return l_base, d_base, dth_base, 0.0

    log_pi = log_sigmoid(logit_pi)
    log_1mpi = log_sigmoid(-logit_pi)
    if x > 0.0:
        return log_1mpi + l_base, d_base, dth_base, -math.exp(log_pi)
    ll = log_add_exp(log_pi, log_1mpi + l_base)
    w = math.exp(log_1mpi + l_base - ll)  # weight of the count component
    d_z = math.exp(log_pi + log_1mpi - ll) * (-math.expm1(l_base))
    return ll, w * d_base, w * dth_base, d_z


@njit(cache=True, error_model="numpy")
def evaluate(q, want_grad, grad, point_ll, point_mu,
             ptr, ccol, cval, col_q, col_sq,
             n_events, n_strata, rate_row0, exit_row0, prev_row0,
             x_on, x_off, x_e, t_on, t_off, x_o, t_o, t_d, n_c, pop,
             lf_on, lf_off, lf_e, lf_o, lchoose,
             fam, th_q, pi_q, bias_q, pm_q, pc_q0,
             prior_kind, prior_a, prior_b):
    """Joint log-posterior.

    Returns (log posterior, log likelihood, floored strata, strata with
    Prev^c + Prev^e >= 1).  Writes the gradient into ``grad`` when
    ``want_grad``; fills ``point_ll``/``point_mu`` when they are
    non-empty, laid out per event as [on, off, extra] blocks of
    ``n_strata``, then exit, then cohort size.
    """
    S = n_strata
    E = n_events
    n_cols = col_q.shape[0]
    n_rows = ptr.shape[0] - 1
    want_points = point_ll.shape[0] > 0

    coef = np.empty(n_cols)
    for j in range(n_cols):
        if col_sq[j] < 0:
            coef[j] = q[col_q[j]]
        else:
            coef[j] = math.exp(q[col_sq[j]]) * q[col_q[j]]
    eta = np.zeros(n_rows)
    for r in range(n_rows):
        acc = 0.0
        for k in range(ptr[r], ptr[r + 1]):
            acc += cval[k] * coef[ccol[k]]
        eta[r] = acc

    g_eta = np.zeros(n_rows)
    if want_grad:
        for i in range(grad.shape[0]):
            grad[i] = 0.0

    pm = 1.0
    if pm_q >= 0:
        pm = sigmoid(q[pm_q])
    g_zpm = 0.0

    loglik = 0.0
    n_floor = 0
    n_over = 0
    exit_base = 3 * E * S

    for s in range(S):
        # other-cause exit
        lam_o = math.exp(eta[exit_row0 + s])
        mu = lam_o * t_o[s]
        lt = q[th_q[E]] if th_q[E] >= 0 else 0.0
        zp = q[pi_q[E]] if pi_q[E] >= 0 else 0.0
        ll, dmu, dlt, dz = count_term(x_o[s], lf_o[s], mu, fam[E], lt, zp)
        loglik += ll
        g_lam_o = dmu * t_o[s]
        if want_grad:
            if th_q[E] >= 0:
                grad[th_q[E]] += dlt
            if pi_q[E] >= 0:
                grad[pi_q[E]] += dz
        if want_points:
            point_ll[exit_base + s] = ll
            point_mu[exit_base + s] = mu

        # extra population and its time at risk
        pe = sigmoid(eta[prev_row0 + s])
        ne = pe * pop[s]
        r, dr = rmst_and_derivative(lam_o)
        excess = ne - t_d[s]
        if excess > 0.0:
            te = t_d[s] + excess * r
        else:
            excess = 0.0
            te = t_d[s]
            n_floor += 1
        pc = sigmoid(q[pc_q0 + s])
        if pc + pe >= 1.0:
            n_over += 1
        g_te = 0.0

        for e in range(E):
            lt = q[th_q[e]] if th_q[e] >= 0 else 0.0
            zp = q[pi_q[e]] if pi_q[e] >= 0 else 0.0
            row_off = rate_row0[e] + s
            row_on = rate_row0[e] + S + s
            lam_off = math.exp(eta[row_off])
            lam_on = math.exp(eta[row_on])
            base = e * 3 * S

            mu = pm * lam_on * t_on[s]
            ll, dmu, dlt, dz = count_term(x_on[e, s], lf_on[e, s], mu, fam[e], lt, zp)
            loglik += ll
            if want_grad:
                g_eta[row_on] += dmu * mu
                g_zpm += dmu * mu * (1.0 - pm)
                if th_q[e] >= 0:
                    grad[th_q[e]] += dlt
                if pi_q[e] >= 0:
                    grad[pi_q[e]] += dz
            if want_points:
                point_ll[base + s] = ll
                point_mu[base + s] = mu

            mu = pm * lam_off * t_off[s]
            ll, dmu, dlt, dz = count_term(x_off[e, s], lf_off[e, s], mu, fam[e], lt, zp)
            loglik += ll
            if want_grad:
                g_eta[row_off] += dmu * mu
                g_zpm += dmu * mu * (1.0 - pm)
                if th_q[e] >= 0:
                    grad[th_q[e]] += dlt
                if pi_q[e] >= 0:
                    grad[pi_q[e]] += dz
            if want_points:
                point_ll[base + S + s] = ll
                point_mu[base + S + s] = mu

            bq = bias_q[e, s]
            eb = math.exp(q[bq]) if bq >= 0 else 1.0
            extra = lam_off * te * eb
            cross = lam_off * t_off[s] + lam_on * t_on[s]
            mu = pm * extra + (1.0 - pm) * cross
            ll, dmu, dlt, dz = count_term(x_e[e, s], lf_e[e, s], mu, fam[e], lt, zp)
            loglik += ll
            if want_grad:
                g_eta[row_off] += dmu * (pm * extra + (1.0 - pm) * lam_off * t_off[s])
                g_eta[row_on] += dmu * (1.0 - pm) * lam_on * t_on[s]
                g_te += dmu * pm * lam_off * eb
                if bq >= 0:
                    grad[bq] += dmu * pm * extra
                g_zpm += dmu * pm * (1.0 - pm) * (extra - cross)
                if th_q[e] >= 0:
                    grad[th_q[e]] += dlt
                if pi_q[e] >= 0:
                    grad[pi_q[e]] += dz
            if want_points:
                point_ll[base + 2 * S + s] = ll
                point_mu[base + 2 * S + s] = mu

        # cohort size
        zc = q[pc_q0 + s]
        ll = lchoose[s] + n_c[s] * log_sigmoid(zc) + (pop[s] - n_c[s]) * log_sigmoid(-zc)
        loglik += ll
        if want_points:
            point_ll[exit_base + S + s] = ll
            point_mu[exit_base + S + s] = pop[s] * pc
        if want_grad:
            grad[pc_q0 + s] += n_c[s] - pop[s] * pc
            # time at risk -> exit rate and extra prevalence
            if excess > 0.0:
                g_lam_o += g_te * excess * dr
                g_eta[prev_row0 + s] += g_te * r * pop[s] * pe * (1.0 - pe)
            g_eta[exit_row0 + s] += g_lam_o * lam_o

    logp = loglik
    for i in range(q.shape[0]):
        a = prior_a[i]
        b = prior_b[i]
        if prior_kind[i] == 0:
            u = (q[i] - a) / b
            logp += -0.5 * u * u - math.log(b) - 0.5 * _LOG_2PI
            if want_grad:
                grad[i] += -u / b
        else:
            sig = math.exp(q[i])
            u = sig / b
            logp += math.log(2.0) - 0.5 * _LOG_2PI - math.log(b) - 0.5 * u * u + q[i]
            if want_grad:
                grad[i] += 1.0 - u * u

    if want_grad:
        if pm_q >= 0:
            grad[pm_q] += g_zpm
        g_coef = np.zeros(n_cols)
        for r in range(n_rows):
            g = g_eta[r]
            if g != 0.0:
                for k in range(ptr[r], ptr[r + 1]):
                    g_coef[ccol[k]] += cval[k] * g
        for j in range(n_cols):
            if col_sq[j] < 0:
                grad[col_q[j]] += g_coef[j]
            else:
                sc = math.exp(q[col_sq[j]])
                grad[col_q[j]] += g_coef[j] * sc
                grad[col_sq[j]] += g_coef[j] * sc * q[col_q[j]]

    return logp, loglik, n_floor, n_over


@njit(cache=True, error_model="numpy")
def count_loglik_array(x, mu, fam, log_theta, logit_pi):
    n = x.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = count_term(x[i], math.lgamma(x[i] + 1.0), mu[i], fam,
                            log_theta[i], logit_pi[i])[0]
    return out
