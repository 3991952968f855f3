"""Shared test helpers."""

import numpy as np

from bevssm.autodiff import Tape


def gradcheck_params(f, params, eps=1e-5, atol=1e-7, rtol=1e-4):
    """Central finite differences with mixed tolerances, torch-gradcheck style.

    The absolute floor absorbs FD rounding noise on coordinates whose true
    gradient is orders of magnitude below the loss scale.
    """
    with Tape() as tape:
        loss = f()
    grads = tape.gradients(loss, params)
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gf = np.asarray(g).reshape(-1)
        fd = np.zeros_like(gf)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2 * eps)
        np.testing.assert_allclose(gf, fd, rtol=rtol, atol=atol)
