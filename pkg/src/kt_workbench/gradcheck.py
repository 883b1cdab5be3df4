"""Central finite-difference checks of the reverse-mode gradients.

Function values for the differences are computed in extended precision
(``np.longdouble``) so that coordinates with small gradients are not swamped
by float64 rounding of the loss; the analytic side stays float64.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import NumericError
from .tensor import Tensor, backward, no_grad

WIDE = np.longdouble


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=WIDE)
    numeric = np.asarray(numeric, dtype=WIDE)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def _value(out):
    v = out.data if isinstance(out, Tensor) else np.asarray(out)
    v = WIDE(np.asarray(v).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError("non-finite function value during finite differencing")
    return v


def _central(evaluate, flat, i, h):
    orig = flat[i]
    flat[i] = orig + WIDE(h)
    fp = _value(evaluate())
    flat[i] = orig - WIDE(h)
    fm = _value(evaluate())
    flat[i] = orig
    return (fp - fm) / (2 * WIDE(h))


def grad_check(f, point, h=1e-5):
    """Max relative error between backprop and central differences of ``f`` at ``point``.

    ``f`` maps a Tensor to a scalar Tensor.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    if y.requires_grad:
        backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)
    wide = base.astype(WIDE)
    flat = wide.reshape(-1)
    numeric = np.zeros(flat.size, dtype=WIDE)
    with no_grad():
        for i in range(flat.size):
            numeric[i] = _central(lambda: f(Tensor(wide)), flat, i, h)
    return relative_error(analytic.reshape(-1), numeric)


@contextmanager
def _widened(params):
    saved = {k: p.data for k, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(WIDE)
        yield
    finally:
        for k, p in params.items():
            p.data = saved[k]


def grad_check_params(loss_fn, params, h=1e-5, max_coords=None, rng=None):
    """Check every tensor in ``params`` (name -> Tensor) against central differences.

    ``loss_fn()`` must rebuild the graph from the current parameter data.
    Returns name -> max relative error. ``max_coords`` subsamples large groups.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    report = {}
    with no_grad(), _widened(params):
        for name, p in params.items():
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
            numeric = np.array([_central(loss_fn, flat, i, h) for i in coords], dtype=WIDE)
            report[name] = relative_error(analytic[name].reshape(-1)[coords], numeric)
    return report


# -- model suites -------------------------------------------------------------

SUITES = ("dkt_vanilla", "dkt_lstm", "akt_index_distance", "akt_context_aware")


def random_sequences(rng, n_seq=2, steps=8, num_kcs=5, num_questions=9):
    """Short random KC-level sequences; position 2 repeats the question at position 1."""
    from .data import InteractionSequence

    out = []
    for uid in range(n_seq):
        q = rng.integers(0, num_questions, steps)
        rep = np.zeros(steps, dtype=np.int64)
        if steps > 2:
            q[2], rep[2] = q[1], 1
        out.append(
            InteractionSequence(
                uid=uid,
                questions=q,
                concepts=rng.integers(0, num_kcs, steps),
                responses=rng.integers(0, 2, steps),
                timestamps=np.arange(steps),
                selectmask=np.ones(steps, dtype=np.int64),
                is_repeat=rep,
            )
        )
    return out


def build_suite(name, seed=0, dim=16, steps=8):
    """(loss_fn, params) for one suite on random sequences, with dropout off."""
    from .akt import AKT, AKTConfig
    from .batching import make_batch
    from .dkt import DKT, DKTConfig, masked_bce_loss

    rng = np.random.default_rng(seed)
    K, Q = 5, 9
    batch = make_batch(random_sequences(rng, steps=steps, num_kcs=K, num_questions=Q))
    y = batch.labels[batch.predicted()]
    ones = np.ones(len(y), dtype=np.int64)
    if name.startswith("dkt_"):
        model = DKT(DKTConfig(K, hidden_dim=dim, cell=name[4:]), rng=rng)
    elif name.startswith("akt_"):
        model = AKT(AKTConfig(K, Q, d_model=dim, num_heads=2, ff_dim=dim, decay_mode=name[4:]), rng=rng)
        # move off the symmetric starting point so every group has a generic gradient
        model.params["mu"].data[:] = rng.normal(size=Q) * 0.5
        for k, p in model.params.items():
            if k.endswith("theta"):
                p.data[:] = rng.normal(size=p.shape)
    else:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")

    def loss_fn():
        loss = masked_bce_loss(model.batch_forward(batch), y, ones)
        reg = model.regularization()
        return loss if reg is None else loss + reg

    return loss_fn, model.params


def run_suites(names=SUITES, seed=0, dim=16, max_coords=None):
    """Suite name -> {parameter group -> max relative error}."""
    out = {}
    for name in names:
        loss_fn, params = build_suite(name, seed=seed, dim=dim)
        out[name] = grad_check_params(loss_fn, params, max_coords=max_coords)
    return out
