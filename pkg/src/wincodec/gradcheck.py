"""Central finite-difference gradient checking.

The numerical side evaluates the function as plain float arithmetic
(no tape), so it stays an independent oracle for the reverse-mode
engine.  Relative error uses |ad - fd| / (|fd| + 1e-8), matching the
tolerance contract used across the test suite.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward


def _scalar(f, arrays):
    out = f(*arrays)
    return out.item() if isinstance(out, Tensor) else float(out)


def numerical_grad(f, arrays, index, h=1e-5):
    """Central FD gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f, arrays)
        flat[i] = orig - h
        fm = _scalar(f, arrays)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(ad, fd):
    return float(np.max(np.abs(ad - fd) / (np.abs(fd) + 1e-8)))


def check_gradients(f, arrays, rtol=1e-4, h=1e-5):
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` must accept numpy arrays or Tensors interchangeably (Tensor
    ops coerce raw arrays on the fly).  Returns the worst relative
    error over all inputs; raises AssertionError beyond ``rtol``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        out = f(*leaves)
        backward(out)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        fd = numerical_grad(lambda *xs: _scalar(f, xs), arrays, i, h=h)
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        err = max_rel_err(ad, fd)
        worst = max(worst, err)
        if err >= rtol:
            raise AssertionError(
                f"gradient mismatch on input {i}: rel err {err:.3e} >= {rtol:.0e}"
            )
    return worst


def check_model_gradients(forward, params, rtol=1e-3, h=1e-5, max_coords=None, rng=None,
                          atol=1e-9):
    """FD-check a model loss against the tape, perturbing params in place.

    ``forward`` is a zero-arg closure returning the scalar loss Tensor;
    called under a tape once for autodiff, then repeatedly (untaped) for
    central differences.  ``max_coords`` limits the FD sweep to a random
    per-parameter subset, which keeps full-model checks cheap.  ``atol``
    absorbs the FD roundoff floor (~eps*|loss|/2h) on near-zero
    gradients, where the relative criterion is all noise.  Returns the
    worst relative error seen.
    """
    for p in params:
        p.grad = None
    with Tape():
        loss = forward()
        backward(loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            assert rng is not None, "max_coords needs an rng"
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = range(flat.size)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = forward().item()
            flat[c] = orig - h
            fm = forward().item()
            flat[c] = orig
            fd = (fp - fm) / (2.0 * h)
            if abs(gflat[c] - fd) < atol:
                continue
            err = abs(gflat[c] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, err)
            if err >= rtol:
                raise AssertionError(
                    f"model gradient mismatch at coord {c}: "
                    f"ad={gflat[c]:.6e} fd={fd:.6e} rel err {err:.3e}"
                )
    return worst
