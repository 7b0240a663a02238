"""Loop/enumeration reference implementations, deliberately naive."""

import itertools
import math

import numpy as np


def chunked_adapter(g_hat, w1, w2, d):
    flat = list(np.ravel(g_hat))
    cs = math.ceil(len(flat) / d)
    flat += [0.0] * (d * cs - len(flat))
    out = []
    for i in range(d):
        chunk = flat[i * cs : (i + 1) * cs]
        hidden = [sum(w1[h, j] * chunk[j] for j in range(cs)) for h in range(w1.shape[0])]
        out.append(sum(w2[0, h] * hidden[h] for h in range(w1.shape[0])))
    return np.array(out)


def read(memory, u_hat, k):
    n, d = memory.shape
    scores = [sum(memory[i, j] * u_hat[j] for j in range(d)) for i in range(n)]
    top = max(scores)
    exps = [math.exp(s - top) for s in scores]
    total = sum(exps)
    weights = [e / total for e in exps]
    best = None
    for subset in itertools.combinations(range(n), k):
        mass = sum(weights[i] for i in subset)
        if best is None or mass > best[0] + 1e-15:
            best = (mass, subset)
    r_k = np.zeros(n)
    for i in best[1]:
        r_k[i] = weights[i]
    u_tilde = np.array([sum(r_k[i] * memory[i, j] for i in range(n)) for j in range(d)])
    return u_tilde, r_k


def write(memory, u_hat, r_k, tau):
    n, d = memory.shape
    out = np.zeros((n, d))
    for i in range(n):
        for j in range(d):
            out[i, j] = tau * memory[i, j] + (1 - tau) * u_hat[j] * r_k[i]
        norm = math.sqrt(sum(out[i, j] ** 2 for j in range(d)))
        if norm > 1:
            for j in range(d):
                out[i, j] /= norm
    return out
