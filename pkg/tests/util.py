"""Shared test oracles, kept independent of the library's backward pass."""

import numpy as np

from agglomerate.numerics import Tape, Tensor, backward


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(make_loss, params: dict[str, np.ndarray], total_probes: int = 100,
                    eps: float = 1e-5, tol: float = 1e-4, rng=None) -> float:
    """Compare tape gradients against central finite differences in float64.

    ``make_loss`` maps a dict of Tensors to a scalar Tensor; it is re-run from
    plain arrays for every probe so the numeric side never touches the tape.
    Returns the worst relative error seen.
    """
    rng = rng or np.random.default_rng(0)
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    with Tape() as tape:
        loss = make_loss(tensors)
    backward(loss, tape)
    analytic = {k: t.grad.copy() for k, t in tensors.items()}

    def value_at(name, flat_idx, delta):
        arrays = {k: v.copy() for k, v in base.items()}
        arrays[name].ravel()[flat_idx] += delta
        return float(make_loss({k: Tensor(v) for k, v in arrays.items()}).data)

    names = sorted(base)
    worst = 0.0
    for _ in range(total_probes):
        name = names[int(rng.integers(len(names)))]
        idx = int(rng.integers(base[name].size))
        numeric = (value_at(name, idx, eps) - value_at(name, idx, -eps)) / (2 * eps)
        err = relative_error(float(analytic[name].ravel()[idx]), numeric)
        worst = max(worst, err)
        assert err < tol, (f"gradient mismatch for {name}[{idx}]: "
                           f"analytic={analytic[name].ravel()[idx]}, numeric={numeric}, rel={err}")
    return worst
