"""Compiled inner loops for the marginal-likelihood objectives.

Everything here works on plain float64 arrays so the hot path (thousands of
objective/gradient evaluations per hyperparameter fit) stays allocation-light
and compiled.  The public modules own validation, packing and error handling.

The correlated objective is staged: a compiled kernel builds the covariance,
LAPACK potrf/potri produce the factor and the inverse (numba exposes no
potri equivalent, and the LU fallback costs twice as much at K=200), and a
second compiled kernel folds the triangle sums into the gradient.

Parameter vector layout for the correlated model (everything but the mean is
optimized on the log scale):

    theta = [mean,
             log ope_noise_var,
             log return_noise_var,
             log kernel_var,
             log constant_var,
             log length_scale]
"""

import math

import numpy as np
from numba import njit
from scipy.linalg import lapack as _lapack

JITTER_REL = 1e-8


@njit(cache=True)
def _gp_build(theta, d, has_ope, count, ope, total):
    """Effective observations plus the stabilized covariance and exp matrix."""
    n = d.shape[0]
    v_ope = math.exp(theta[1])
    v_ret = math.exp(theta[2])
    v_k = math.exp(theta[3])
    v_c = math.exp(theta[4])
    ell = math.exp(theta[5])

    lam = np.empty(n)
    y = np.empty(n)
    for k in range(n):
        p = has_ope[k] / v_ope + count[k] / v_ret
        lam[k] = 1.0 / p
        y[k] = lam[k] * (has_ope[k] * ope[k] / v_ope + total[k] / v_ret)

    jit = JITTER_REL * (v_k + v_c)
    e_mat = np.empty((n, n))
    cov = np.empty((n, n))
    for i in range(n):
        e_mat[i, i] = 1.0
        cov[i, i] = v_k + v_c + lam[i] + jit
        for j in range(i):
            e = math.exp(-d[i, j] / ell)
            e_mat[i, j] = e
            e_mat[j, i] = e
            cij = v_k * e + v_c
            cov[i, j] = cij
            cov[j, i] = cij
    return y, lam, cov, e_mat


@njit(cache=True)
def _gp_reduce(theta, d, e_mat, cinv_u, logdet, y, lam,
               has_ope, ope, count, total, total_sq, prior_ab, use_priors):
    """Fold the inverse covariance into the objective value and gradient.

    ``cinv_u`` carries the inverse only in its diagonal and upper triangle
    (the lower one still holds factorization leftovers), so every loop below
    indexes j > i.
    """
    n = d.shape[0]
    m = theta[0]
    v_ope = math.exp(theta[1])
    v_ret = math.exp(theta[2])
    v_k = math.exp(theta[3])
    v_c = math.exp(theta[4])
    ell = math.exp(theta[5])

    u = y - m
    alpha = np.zeros(n)
    for i in range(n):
        s = cinv_u[i, i] * u[i]
        for j in range(i + 1, n):
            cv = cinv_u[i, j]
            s += cv * u[j]
            alpha[j] += cv * u[i]
        alpha[i] += s

    quad = 0.0
    sum_alpha = 0.0
    alpha_sq = 0.0
    for k in range(n):
        quad += u[k] * alpha[k]
        sum_alpha += alpha[k]
        alpha_sq += alpha[k] * alpha[k]

    # fused reductions against the kernel derivative structures
    a_e_a = 0.0      # alpha' E alpha
    a_ed_a = 0.0     # alpha' (E o D) alpha
    s_e = 0.0        # sum(cinv o E)
    s_ed = 0.0       # sum(cinv o E o D)
    s_c = 0.0        # sum(cinv)
    tr_cinv = 0.0
    for i in range(n):
        a_e_a += alpha[i] * alpha[i]
        s_e += cinv_u[i, i]
        s_c += cinv_u[i, i]
        tr_cinv += cinv_u[i, i]
        for j in range(i + 1, n):
            e = e_mat[i, j]
            cv = cinv_u[i, j]
            dd = d[i, j]
            aa2 = 2.0 * alpha[i] * alpha[j]
            a_e_a += aa2 * e
            a_ed_a += aa2 * e * dd
            s_e += 2.0 * cv * e
            s_ed += 2.0 * cv * e * dd
            s_c += 2.0 * cv

    # per-policy bookkeeping for collapsing raw observations onto y
    book = 0.0
    g_ope = 0.0
    g_ret = 0.0
    for k in range(n):
        book += 0.5 * math.log(lam[k])
        book -= 0.5 * (has_ope[k] * theta[1] + count[k] * theta[2])
        book -= 0.5 * (
            has_ope[k] * ope[k] * ope[k] / v_ope
            + total_sq[k] / v_ret
            - y[k] * y[k] / lam[k]
        )
        dlam_o = lam[k] * lam[k] * has_ope[k] / v_ope
        dlam_r = lam[k] * lam[k] * count[k] / v_ret
        dy_o = (has_ope[k] / v_ope) * lam[k] * (y[k] - ope[k])
        dy_r = (lam[k] / v_ret) * (count[k] * y[k] - total[k])
        a_kk = alpha[k] * alpha[k] - cinv_u[k, k]
        g_ope += 0.5 * a_kk * dlam_o - alpha[k] * dy_o
        g_ret += 0.5 * a_kk * dlam_r - alpha[k] * dy_r
        resid = y[k] - ope[k]
        g_ope += -0.5 * has_ope[k] + (has_ope[k] / (2.0 * v_ope)) * (lam[k] + resid * resid)
        sq = total_sq[k] - 2.0 * y[k] * total[k] + count[k] * y[k] * y[k]
        g_ret += -0.5 * count[k] + (0.5 / v_ret) * (count[k] * lam[k] + sq)

    value = -0.5 * logdet - 0.5 * quad + book

    g_m = sum_alpha
    g_k = 0.5 * v_k * (a_e_a - s_e + JITTER_REL * (alpha_sq - tr_cinv))
    g_c = 0.5 * v_c * (sum_alpha * sum_alpha - s_c + JITTER_REL * (alpha_sq - tr_cinv))
    g_l = 0.5 * (v_k / ell) * (a_ed_a - s_ed)

    if use_priors:
        variances = (v_ope, v_ret, v_k, v_c)
        extra = np.zeros(4)
        for idx in range(4):
            a_p = prior_ab[2 * idx]
            b_p = prior_ab[2 * idx + 1]
            v = variances[idx]
            value += a_p * math.log(b_p) - math.lgamma(a_p) - (a_p + 1.0) * math.log(v) - b_p / v
            extra[idx] = -(a_p + 1.0) + b_p / v
        g_ope += extra[0]
        g_ret += extra[1]
        g_k += extra[2]
        g_c += extra[3]

    grad = np.empty(6)
    grad[0] = g_m
    grad[1] = g_ope
    grad[2] = g_ret
    grad[3] = g_k
    grad[4] = g_c
    grad[5] = g_l
    return value, grad


def gp_value_and_grad(theta, d, has_ope, ope, count, total, total_sq, prior_ab, use_priors):
    """Joint log marginal likelihood and its gradient for the observed subset.

    ``d`` is the (n, n) distance matrix over observed policies only; the
    per-policy arrays are aligned with it.  ``prior_ab`` holds inverse-gamma
    (alpha, beta) pairs for the four variances in theta order.

    Additive constants that do not depend on theta are dropped.  Raises
    LinAlgError if the stabilized covariance cannot be factorized.
    """
    y, lam, cov, e_mat = _gp_build(theta, d, has_ope, count, ope, total)
    # cov.T is a copy-free Fortran view and, by symmetry, the same matrix;
    # potrf/potri then work in place, leaving the Fortran-lower (= C-upper)
    # triangle holding first the factor and finally the inverse.
    factor, info = _lapack.dpotrf(cov.T, lower=1, overwrite_a=True, clean=0)
    if info != 0:
        raise np.linalg.LinAlgError("covariance is not positive definite")
    logdet = 2.0 * float(np.sum(np.log(np.diagonal(factor))))
    cinv, info = _lapack.dpotri(factor, lower=1, overwrite_c=True)
    if info != 0:
        raise np.linalg.LinAlgError("covariance inverse failed")
    return _gp_reduce(theta, d, e_mat, cinv.T, logdet, y, lam,
                      has_ope, ope, count, total, total_sq, prior_ab, use_priors)


@njit(cache=True)
def ind_policy_value_grad(lv_ope, lv_ret, has_ope, ope, count, total, total_sq,
                          a_ope, b_ope, a_ret, b_ret):
    """Marginal log likelihood of one policy's data under the uncorrelated
    model, with its gradient in (log ope_noise_var, log return_noise_var).

    The offline estimate acts as a unit-information prior mean; with no
    returns the data terms cancel and only the variance priors remain.
    """
    v_ope = math.exp(lv_ope)
    v_ret = math.exp(lv_ret)
    p = has_ope / v_ope + count / v_ret
    lam = 1.0 / p
    y = lam * (has_ope * ope / v_ope + total / v_ret)

    value = 0.5 * math.log(lam)
    value -= 0.5 * (has_ope * lv_ope + count * lv_ret)
    value -= 0.5 * (has_ope * ope * ope / v_ope + total_sq / v_ret - y * y / lam)
    value += a_ope * math.log(b_ope) - math.lgamma(a_ope) - (a_ope + 1.0) * lv_ope - b_ope / v_ope
    value += a_ret * math.log(b_ret) - math.lgamma(a_ret) - (a_ret + 1.0) * lv_ret - b_ret / v_ret

    resid = y - ope
    g_ope = -0.5 * has_ope + (has_ope / (2.0 * v_ope)) * (lam + resid * resid)
    g_ope += -(a_ope + 1.0) + b_ope / v_ope
    sq = total_sq - 2.0 * y * total + count * y * y
    g_ret = -0.5 * count + (0.5 / v_ret) * (count * lam + sq)
    g_ret += -(a_ret + 1.0) + b_ret / v_ret
    return value, g_ope, g_ret


@njit(cache=True)
def ind_fit(theta0, has_ope, ope, count, total, total_sq, a_ope, b_ope, a_ret, b_ret,
            lr, beta1, beta2, eps, steps):
    """Per-policy Adam ascent of the uncorrelated marginal.

    ``theta0`` is (K, 2) of (log ope_noise_var, log return_noise_var).
    Policies without any observation are returned unchanged.  Each policy
    keeps the best iterate seen.
    """
    k_total = theta0.shape[0]
    out = theta0.copy()
    for k in range(k_total):
        if has_ope[k] == 0.0 and count[k] == 0.0:
            continue
        t0 = theta0[k, 0]
        t1 = theta0[k, 1]
        v, g0, g1 = ind_policy_value_grad(
            t0, t1, has_ope[k], ope[k], count[k], total[k], total_sq[k],
            a_ope, b_ope, a_ret, b_ret)
        best_v = v
        best0 = t0
        best1 = t1
        m0 = 0.0
        m1 = 0.0
        s0 = 0.0
        s1 = 0.0
        for t in range(1, steps + 1):
            m0 = beta1 * m0 + (1.0 - beta1) * g0
            m1 = beta1 * m1 + (1.0 - beta1) * g1
            s0 = beta2 * s0 + (1.0 - beta2) * g0 * g0
            s1 = beta2 * s1 + (1.0 - beta2) * g1 * g1
            c1 = 1.0 - beta1 ** t
            c2 = 1.0 - beta2 ** t
            d0 = lr * (m0 / c1) / (math.sqrt(s0 / c2) + eps)
            d1 = lr * (m1 / c1) / (math.sqrt(s1 / c2) + eps)
            accepted = False
            for halving in range(2):
                scale = 1.0 if halving == 0 else 0.5
                n0 = min(25.0, max(-25.0, t0 + scale * d0))
                n1 = min(25.0, max(-25.0, t1 + scale * d1))
                nv, ng0, ng1 = ind_policy_value_grad(
                    n0, n1, has_ope[k], ope[k], count[k], total[k], total_sq[k],
                    a_ope, b_ope, a_ret, b_ret)
                if math.isfinite(nv):
                    t0 = n0
                    t1 = n1
                    v = nv
                    g0 = ng0
                    g1 = ng1
                    accepted = True
                    break
            if accepted and v > best_v:
                best_v = v
                best0 = t0
                best1 = t1
        out[k, 0] = best0
        out[k, 1] = best1
    return out
