"""Shared test helpers: the finite-difference gradient oracle.

The oracle re-evaluates the loss as a plain function of perturbed float64
inputs; it never inspects the tape, so it stays independent of the backward
implementation it checks.
"""

import numpy as np
import pytest

from sonomae import ndgrad


def finite_difference(loss_fn, arrays: dict, h: float = 1e-3) -> dict:
    """Central-difference gradients of ``loss_fn(arrays) -> float`` with
    respect to every float64 array in ``arrays``. Mutates entries in place
    temporarily; restores them exactly."""
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(arrays)
            flat[i] = orig - h
            down = loss_fn(arrays)
            flat[i] = orig
            gf[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-2) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor); the floor turns the
    comparison absolute for near-zero gradients."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def max_grad_error(loss_fn, leaves: dict, h: float = 1e-3) -> float:
    """Backward gradients of ``loss_fn`` (built from ndgrad ops over float64
    leaf Tensors) against the finite-difference oracle. Returns the worst
    relative error across all leaves."""
    tensors = {k: ndgrad.Tensor(v.copy(), requires_grad=True, dtype=np.float64)
               for k, v in leaves.items()}
    loss = loss_fn(tensors)
    ndgrad.backward(loss)

    def eval_loss(arrays):
        frozen = {k: ndgrad.Tensor(v, dtype=np.float64) for k, v in arrays.items()}
        with ndgrad.no_grad():
            return float(loss_fn(frozen).data)

    fd = finite_difference(eval_loss, {k: v.copy() for k, v in leaves.items()}, h=h)
    worst = 0.0
    for name in leaves:
        assert tensors[name].grad is not None, f"no gradient reached leaf {name}"
        worst = max(worst, relative_error(tensors[name].grad, fd[name]))
    return worst


@pytest.fixture(autouse=True)
def _reset_ndgrad_state():
    ndgrad.clear_graph()
    ndgrad.set_finite_checks(True)
    yield
    ndgrad.clear_graph()
    ndgrad.set_finite_checks(True)
