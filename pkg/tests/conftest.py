import numpy as np
import pytest

from detlab.tensor import Parameter, Tape, backward, record


def run_gradcheck(build_loss, params, eps=1e-5, rel_tol=1e-4):
    """Central-finite-difference oracle for reverse-mode gradients.

    ``build_loss`` recomputes the scalar loss from the current parameter
    values; ``params`` are f64 Parameters whose analytic gradients are
    compared element-wise against (f(x+eps) - f(x-eps)) / 2eps.
    """
    for p in params:
        assert p.data.dtype == np.float64, "gradcheck runs in float64"
        p.grad = None
    tape = Tape()
    with record(tape):
        loss = build_loss()
    assert loss.data.ndim == 0
    backward(loss, tape)
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(build_loss().data)
            flat[i] = orig - eps
            down = float(build_loss().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        err = np.abs(analytic - numeric).max() / scale
        assert err <= rel_tol, f"gradient mismatch for {p.name or 'param'}: rel err {err:.3e}"


def make_param(rng, shape, margin=None, name="p"):
    """Random f64 parameter; ``margin`` pushes values away from |x| = 0 kinks."""
    data = rng.normal(0.0, 1.0, size=shape)
    if margin is not None:
        data = np.where(np.abs(data) < margin, np.sign(data) * margin + data, data)
    return Parameter(data.astype(np.float64), "head", name=name)


def random_shape(rng, max_rank=4, max_extent=6, min_rank=1):
    rank = int(rng.integers(min_rank, max_rank + 1))
    return tuple(int(rng.integers(1, max_extent + 1)) for _ in range(rank))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
