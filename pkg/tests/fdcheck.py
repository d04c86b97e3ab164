"""Central finite differences, kept independent of torch.autograd."""

import numpy as np
import torch


def central_difference(fn, tensors, h=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor, perturbing in place."""
    grads = []
    for t in tensors:
        g = np.zeros(t.shape)
        flat = t.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-5):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
