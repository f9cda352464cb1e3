import numpy as np

from .tensor import GradTape


def finite_diff_check(f, params, eps=1e-5, max_coords=2000, rng=None, atol=1e-5, per_param=None):
    """Compare tape gradients of ``f(params)`` with central differences.

    Returns the maximum relative error ``|a - n| / max(|a|, |n|, atol)`` over
    at most ``max_coords`` sampled coordinates.  With ``per_param`` set, up to
    that many coordinates are drawn from every tensor instead, so small
    tensors are never skipped.  ``f`` must be deterministic.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    with GradTape() as tape:
        tape.watch(params)
        loss = f(params)
    analytic = tape.backward(loss)
    for p in params.values():
        p.requires_grad = False

    if per_param is not None:
        coords = []
        for name, p in params.items():
            n = p.data.size
            idx = range(n) if n <= per_param else np.sort(rng.choice(n, size=per_param, replace=False))
            coords.extend((name, int(i)) for i in idx)
    else:
        coords = [(name, i) for name, p in params.items() for i in range(p.data.size)]
    if per_param is None and len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]

    worst = 0.0
    for name, i in coords:
        p = params[name]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(params).data)
        flat[i] = orig - eps
        down = float(f(params).data)
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        a = analytic[name].reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
        worst = max(worst, err)
    return worst
