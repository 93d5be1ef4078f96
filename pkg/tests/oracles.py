"""Independent reference computations shared by the unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np

import torch


def fd_check(loss_fn, params, samples_per_tensor=6, eps=1e-6, seed=0):
    """Compare autograd against central differences on a random subset of entries.

    Returns the norm-wise relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||)
    over all sampled coordinates. ``params`` must be float64 leaf tensors.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    analytic, numeric = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = min(samples_per_tensor, flat.numel())
            for idx in torch.randperm(flat.numel(), generator=gen)[:n].tolist():
                old = flat[idx].item()
                flat[idx] = old + eps
                up = loss_fn().item()
                flat[idx] = old - eps
                down = loss_fn().item()
                flat[idx] = old
                analytic.append(g.view(-1)[idx].item())
                numeric.append((up - down) / (2 * eps))
    a, n = torch.tensor(analytic, dtype=torch.float64), torch.tensor(numeric, dtype=torch.float64)
    denom = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / denom


def d_objective_by_hand(s_r, s_w, s_f, cls=True):
    terms = []
    for r, w, f in zip(s_r, s_w, s_f):
        if cls:
            terms.append(math.log(r) + (math.log(1 - w) + math.log(1 - f)) / 2)
        else:
            terms.append(math.log(r) + math.log(1 - f))
    return sum(terms) / len(terms)


def g_objective_by_hand(s_f, s_int=None):
    value = sum(math.log(v) for v in s_f) / len(s_f)
    if s_int is not None:
        value += sum(math.log(v) for v in s_int) / len(s_int)
    return value


def style_loss_by_hand(z, rec):
    total = 0.0
    for zi, ri in zip(z, rec):
        total += sum((a - b) ** 2 for a, b in zip(zi, ri))
    return total / len(z)


def loop_compatibility(images, texts):
    out = np.zeros((len(images), len(texts)))
    for i in range(len(images)):
        for j in range(len(texts)):
            out[i, j] = sum(float(a) * float(b) for a, b in zip(images[i], texts[j]))
    return out


def loop_joint_loss(s, margin, labels=None):
    """Scalar-loop rendering of the symmetric hinge, each direction averaged over its competitors."""
    n = len(s)
    rows = cols = 0.0
    count = 0
    for i in range(n):
        for j in range(n):
            if i == j or (labels is not None and labels[i] == labels[j]):
                continue
            rows += max(0.0, margin - s[i][i] + s[i][j])
            cols += max(0.0, margin - s[j][j] + s[i][j])
            count += 1
    return (rows + cols) / max(count, 1)
