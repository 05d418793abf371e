"""Shared helpers: finite-difference oracles and tiny model builders."""
import numpy as np

from sfuda.head import HeadConfig, init_head

FD_STEP = 1e-5
FD_TOL = 1e-4


def max_rel_err(a, b):
    """Worst elementwise relative gap with an absolute floor of 1e-6."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def tiny_model(seed=0, d=5, h=6, c=3, norm="batchnorm", act="relu"):
    return init_head(HeadConfig(d, c, hidden_dim=h, norm_kind=norm,
                                activation=act, seed=seed))


def fd_param_grads(model, loss_fn, names=None, step=FD_STEP):
    """Central differences of loss_fn() over the live parameter arrays.

    loss_fn takes no arguments and must rerun the forward pass itself.
    Batchnorm running statistics drift during the probes is rolled back.
    """
    params = model.params()
    if names is None:
        names = list(params)
    saved_stats = None
    if model.norm.kind == "batchnorm":
        saved_stats = (model.norm.running_mean.copy(),
                       model.norm.running_var.copy())
    grads = {}
    for name in names:
        arr = params[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    if saved_stats is not None:
        model.norm.running_mean = saved_stats[0]
        model.norm.running_var = saved_stats[1]
    return grads


def grad_gap(analytic, numeric, names=None):
    if names is None:
        names = list(numeric)
    return max(max_rel_err(analytic[k], numeric[k]) for k in names)
