"""Central finite differences for verifying recorded gradients.

Verification always runs in float64: callers clone their float32 networks to
float64 first (see ``Mlp.copy`` / the ``to_float64`` hooks on the model
classes), then hand this module a closure that rebuilds the loss from scratch
on every call so parameter perturbations take effect.
"""

from __future__ import annotations

import numpy as np

from .tape import Tensor


def fd_gradient_entries(loss_fn, params: list[Tensor],
                        entries: list[tuple[int, int]], eps: float = 1e-4) -> np.ndarray:
    """Central-difference dloss/dtheta for selected flat entries.

    ``entries`` is a list of (param_index, flat_offset) pairs; ``loss_fn`` takes
    no arguments and returns the scalar loss as a float.
    """
    out = np.zeros(len(entries), dtype=np.float64)
    for k, (pi, off) in enumerate(entries):
        flat = params[pi].data.reshape(-1)
        orig = flat[off]
        flat[off] = orig + eps
        up = loss_fn()
        flat[off] = orig - eps
        down = loss_fn()
        flat[off] = orig
        out[k] = (up - down) / (2.0 * eps)
    return out


def pick_entries(params: list[Tensor], n: int, rng) -> list[tuple[int, int]]:
    """Sample ``n`` distinct (param, offset) coordinates across all parameters."""
    sizes = [p.data.size for p in params]
    total = sum(sizes)
    bounds = np.cumsum(sizes)
    picked: list[tuple[int, int]] = []
    seen: set[int] = set()
    while len(picked) < min(n, total):
        flat = int(rng.integers(total))
        if flat in seen:
            continue
        seen.add(flat)
        pi = int(np.searchsorted(bounds, flat, side="right"))
        off = flat - (0 if pi == 0 else int(bounds[pi - 1]))
        picked.append((pi, off))
    return picked


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, 1e-8) per entry."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def check_gradients(build_loss, params: list[Tensor], n_entries: int, rng,
                    eps: float = 1e-4, analytic_grads=None) -> float:
    """Max relative error between backprop and central differences.

    Probes ``n_entries`` random parameter coordinates. A coordinate whose FD
    estimates at eps and eps/2 disagree has a ReLU/clip kink inside the probe
    window, where the numeric oracle itself is invalid; such coordinates are
    redrawn. ``build_loss`` must rebuild the loss deterministically on every
    call (fix any sampling noise beforehand).
    """
    from .tape import backprop

    if analytic_grads is None:
        analytic_grads = backprop(build_loss(), params)

    def f():
        return build_loss().item()

    worst = 0.0
    checked = 0
    attempts = 0
    seen: set[tuple[int, int]] = set()
    while checked < n_entries:
        attempts += 1
        if attempts > 50 * n_entries:
            raise RuntimeError("could not find enough kink-free coordinates")
        entry = pick_entries(params, 1, rng)[0]
        if entry in seen:
            continue
        fd1 = fd_gradient_entries(f, params, [entry], eps)[0]
        fd2 = fd_gradient_entries(f, params, [entry], eps / 2)[0]
        if abs(fd1 - fd2) > 3e-4 * max(abs(fd1), abs(fd2), 1e-3):
            continue
        seen.add(entry)
        pi, off = entry
        analytic = analytic_grads[pi].reshape(-1)[off]
        worst = max(worst, float(relative_error(np.array([analytic]),
                                                np.array([fd1]))[0]))
        checked += 1
    return worst
