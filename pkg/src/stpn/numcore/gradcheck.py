"""Central finite-difference verification of autodiff gradients."""
import numpy as np

from ..errors import NumericError
from .autodiff import Graph, Node, backward


def autodiff_grads(f, params):
    graph = Graph()
    bound = graph.bind(params)
    loss = f(bound)
    if not isinstance(loss, Node):
        # f does not depend on any parameter
        return {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
    return backward(graph, loss)


def _scalar(f, params):
    out = f(params)
    val = float(out.value if isinstance(out, Node) else np.asarray(out))
    if not np.isfinite(val):
        raise NumericError("finite_diff_check: non-finite function value")
    return val


def finite_diff_errors(f, params, eps=1e-5, wrt=None):
    """Per-parameter max relative error between autodiff and central differences.

    ``f`` maps a name->array (or name->Node) dict to a scalar and must be pure.
    The error for a coordinate is ``|g - fd| / max(1, |g|, |fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = autodiff_grads(f, params)
    names = list(params) if wrt is None else list(wrt)
    errors = {}
    for name in names:
        theta = params[name]
        flat = theta.reshape(-1)
        g = grads[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f, params)
            flat[i] = orig - eps
            fm = _scalar(f, params)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            err = abs(g[i] - fd) / max(1.0, abs(g[i]), abs(fd))
            worst = max(worst, err)
        errors[name] = worst
    return errors


def finite_diff_check(f, params, eps=1e-5, wrt=None):
    """Max relative gradient error over every checked coordinate."""
    errors = finite_diff_errors(f, params, eps, wrt)
    return max(errors.values(), default=0.0)
