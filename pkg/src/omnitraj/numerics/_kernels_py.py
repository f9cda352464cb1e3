"""Pure numpy versions of the compiled kernels (same signatures)."""
import numpy as np

SQRT_2_OVER_PI = 0.7978845608028654
GELU_C = 0.044715
MASK_FILL = -1e30


def layer_norm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gain):
    gh = g * gain
    s1 = gh.mean(axis=1, keepdims=True)
    s2 = (gh * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gh - s1 - xhat * s2)
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def softmax_fwd(x, valid):
    valid = valid.astype(bool)
    filled = np.where(valid, x, MASK_FILL)
    m = filled.max(axis=1, keepdims=True)
    e = np.exp(filled - m) * valid
    s = e.sum(axis=1, keepdims=True)
    out = np.zeros_like(e)
    np.divide(e, s, out=out, where=s > 0)
    return out


def softmax_bwd(g, y):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(SQRT_2_OVER_PI * (x + GELU_C * x**3)))


def gelu_bwd(g, x):
    t = np.tanh(SQRT_2_OVER_PI * (x + GELU_C * x**3))
    dt = (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def social_integrate(pos0, vel0, n_steps, dt, strength, cap):
    """Explicit Euler with capped pairwise inverse-square repulsion."""
    p = np.array(pos0, dtype=np.float64)
    v = np.array(vel0, dtype=np.float64)
    n = p.shape[0]
    traj = np.empty((n_steps + 1, n, 2))
    traj[0] = p
    off_diag = ~np.eye(n, dtype=bool)
    for s in range(n_steps):
        diff = p[:, None, :] - p[None, :, :]
        d2 = (diff**2).sum(axis=-1)
        ok = off_diag & (d2 > 0)
        safe = np.where(ok, d2, 1.0)
        mag = np.minimum(strength / safe, cap) * ok
        a = (mag[..., None] * diff / np.sqrt(safe)[..., None]).sum(axis=1)
        p = p + dt * v
        v = v + dt * a
        traj[s + 1] = p
    return traj
