"""Brute-force reference implementations of the verification scores.

Plain Python loops over every index, written directly from the score
definitions with no vectorization or shared helpers, so they can serve as
ground truth for :mod:`s2sdown.verify` on small instances.
"""

from __future__ import annotations

import math

import numpy as np


def loop_mse_ensemble_mean(y, ens):
    T, L, M, G = np.shape(ens)
    out = np.zeros((L, G))
    for l in range(L):
        for g in range(G):
            acc = 0.0
            for t in range(T):
                mean = 0.0
                for m in range(M):
                    mean += ens[t][l][m][g]
                mean /= M
                acc += (y[t][l][g] - mean) ** 2
            out[l, g] = acc / T
    return out


def loop_crps(y, ens):
    """mean_t [ (1/M) sum_m |x_m - y| - (1/(2 M^2)) sum_m sum_n |x_m - x_n| ]."""
    T, L, M, G = np.shape(ens)
    out = np.zeros((L, G))
    for l in range(L):
        for g in range(G):
            acc = 0.0
            for t in range(T):
                a = 0.0
                for m in range(M):
                    a += abs(ens[t][l][m][g] - y[t][l][g])
                b = 0.0
                for m in range(M):
                    for n in range(M):
                        b += abs(ens[t][l][m][g] - ens[t][l][n][g])
                acc += a / M - b / (2.0 * M * M)
            out[l, g] = acc / T
    return out


def loop_ssr(y, ens):
    """sqrt(mean_t unbiased member variance) / RMSE of the ensemble mean; inf at zero RMSE."""
    T, L, M, G = np.shape(ens)
    out = np.zeros((L, G))
    for l in range(L):
        for g in range(G):
            var_acc = 0.0
            err_acc = 0.0
            for t in range(T):
                mean = sum(ens[t][l][m][g] for m in range(M)) / M
                var_acc += sum((ens[t][l][m][g] - mean) ** 2 for m in range(M)) / (M - 1)
                err_acc += (y[t][l][g] - mean) ** 2
            sp = math.sqrt(var_acc / T)
            rmse = math.sqrt(err_acc / T)
            out[l, g] = sp / rmse if rmse > 0 else math.inf
    return out


def loop_ssim(y, ens):
    """Per lead: (luminance, contrast, structure, ssim), each component averaged over (t, m)."""
    T, L, M, G = np.shape(ens)
    res = np.zeros((4, L))
    for l in range(L):
        lum = con = struc = 0.0
        for t in range(T):
            mo = sum(y[t][l][g] for g in range(G)) / G
            so = math.sqrt(sum((y[t][l][g] - mo) ** 2 for g in range(G)) / G)
            for m in range(M):
                mf = sum(ens[t][l][m][g] for g in range(G)) / G
                sf = math.sqrt(sum((ens[t][l][m][g] - mf) ** 2 for g in range(G)) / G)
                cv = sum((ens[t][l][m][g] - mf) * (y[t][l][g] - mo) for g in range(G)) / G
                lum += 2 * mf * mo / (mf * mf + mo * mo)
                con += 2 * sf * so / (sf * sf + so * so)
                struc += cv / (sf * so)
        n = T * M
        res[0, l], res[1, l], res[2, l] = lum / n, con / n, struc / n
        res[3, l] = res[0, l] * res[1, l] * res[2, l]
    return res
