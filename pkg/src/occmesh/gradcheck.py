"""Central finite-difference gradient checks."""

import torch


def numerical_grad(fn, x, step=1e-5):
    """Central differences of scalar ``fn`` at ``x`` (any shape), one coordinate at a time."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + step
            hi = float(fn(x))
            flat[k] = orig - step
            lo = float(fn(x))
            flat[k] = orig
            gflat[k] = (hi - lo) / (2 * step)
    return g


def analytic_grad(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(fn, x, step=1e-5):
    """``|g_auto - g_fd| / |g_fd|`` for a scalar function of one tensor."""
    ga = analytic_grad(fn, x)
    gn = numerical_grad(fn, x, step)
    denom = gn.norm().clamp_min(1e-12)
    return float((ga - gn).norm() / denom)
