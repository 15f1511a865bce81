"""Shared test utilities: finite-difference gradient oracle."""
import numpy as np

from regioncap import autodiff as ad


def finite_diff(f, tensors, step=1e-5):
    """Central finite differences of scalar f() w.r.t. each tensor's entries.

    ``f`` must recompute the forward pass from the tensors' current data.
    Returns a list of arrays shaped like each tensor.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_err(a, b, atol=1e-8):
    """Max entrywise relative error, discounting an absolute FD-noise floor.

    Central differences at step 1e-5 in float64 carry ~1e-10 absolute noise,
    so entries are compared as |a-b| <= atol + rel*max(|a|,|b|); the returned
    value is the smallest rel for which every entry passes.
    """
    diff = np.maximum(np.abs(a - b) - atol, 0.0)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), atol)
    return (diff / denom).max()


def check_grads(f, tensors, tol=1e-6, step=1e-5, atol=1e-8):
    """Run autodiff backward and compare each tensor's grad to central FD."""
    for t in tensors:
        t.zero_grad()
    ad.active_tape().reset()
    loss = f()
    ad.backward(loss)
    with ad.no_grad():
        fd = finite_diff(lambda: f().item(), tensors, step=step)
    worst = 0.0
    for t, g in zip(tensors, fd):
        assert t.grad is not None, "missing gradient"
        worst = max(worst, rel_err(t.grad, g, atol=atol))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst
