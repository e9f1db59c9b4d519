"""Central finite-difference gradient checks for torch modules (float64)."""

import numpy as np
import torch


def probe_loss(module, inputs, probe_seed=0):
    """Deterministic scalar probe: weighted sum of the module output."""
    out = module(*inputs)
    gen = torch.Generator().manual_seed(probe_seed)
    w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    return (out * w).sum()


def max_param_grad_rel_error(module, inputs, n_coords=10, h=1e-5, seed=0):
    """Compare autograd parameter gradients against central differences.

    Returns the worst relative error over n_coords randomly chosen parameter
    coordinates (absolute error is used where the reference is ~0).
    """
    module = module.double()
    inputs = [x.double() if torch.is_floating_point(x) else x for x in inputs]
    loss = probe_loss(module, inputs)
    params = [p for p in module.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    rng = np.random.default_rng(seed)
    flat_sizes = [p.numel() for p in params]
    total = sum(flat_sizes)
    worst = 0.0
    for coord in rng.choice(total, size=min(n_coords, total), replace=False):
        pi, offset = 0, int(coord)
        while offset >= flat_sizes[pi]:
            offset -= flat_sizes[pi]
            pi += 1
        p = params[pi]
        analytic = 0.0 if grads[pi] is None else float(grads[pi].reshape(-1)[offset])
        with torch.no_grad():
            orig = float(p.reshape(-1)[offset])
            p.reshape(-1)[offset] = orig + h
            up = float(probe_loss(module, inputs))
            p.reshape(-1)[offset] = orig - h
            down = float(probe_loss(module, inputs))
            p.reshape(-1)[offset] = orig
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst
