"""Independent reference implementations used by several test modules."""

import math

import numpy as np
import torch


def fd_relative_error(f, x, n_probes=100, h=1e-6, seed=0):
    """Max relative error between autograd and central differences along random unit directions."""
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    g = x.grad.detach()
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_probes):
        d = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        d /= d.norm()
        with torch.no_grad():
            fd = (f(x + h * d) - f(x - h * d)) / (2 * h)
        an = (g * d).sum()
        worst = max(worst, float(abs(fd - an) / max(abs(float(an)), abs(float(fd)), 1e-6)))
    return worst


def knn_oracle(T, y, Q, k, tau, n_classes):
    """Loop-based reference: rank by cosine, sum exp(cos/tau) per class, lowest index wins ties."""
    out = []
    for q in Q:
        sims = [float(np.dot(q, t) / (np.linalg.norm(q) * np.linalg.norm(t))) for t in T]
        order = sorted(range(len(T)), key=lambda i: (-sims[i], i))[:k]
        score = [0.0] * n_classes
        for i in order:
            score[y[i]] += math.exp(sims[i] / tau)
        out.append(max(range(n_classes), key=lambda c: (score[c], -c)))
    return np.array(out)
