"""Central finite differences for verifying tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_STEP = 1e-5
# entries whose magnitude is below this floor are compared in absolute terms
RELATIVE_FLOOR = 1e-6


def numerical_gradient(
    fn: Callable[[], float | np.ndarray],
    arrays: Sequence[np.ndarray],
    h: float = DEFAULT_STEP,
) -> list[np.ndarray]:
    """Central-difference gradient of ``fn()`` with respect to each array.

    ``fn`` reads the arrays in place; each entry is perturbed by ``+h`` and
    ``-h`` and restored afterwards. ``fn`` may return a vector of outputs, in
    which case every returned gradient carries a trailing output axis.
    """
    grads = []
    for arr in arrays:
        flat = arr.reshape(-1)
        out_shape = np.shape(fn())
        g = np.zeros((flat.size,) + out_shape)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = np.asarray(fn(), dtype=np.float64)
            flat[i] = orig - h
            down = np.asarray(fn(), dtype=np.float64)
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
        grads.append(g.reshape(arr.shape + out_shape))
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RELATIVE_FLOOR) -> float:
    """Max over entries of ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def scaled_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RELATIVE_FLOOR) -> float:
    """``max |a - n|`` over the larger of the two gradients' max-norms.

    Entries whose true gradient is zero still pick up one ulp of the loss
    divided by ``2h`` under central differences; normalising by the whole
    gradient keeps that rounding noise from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
    return float(np.max(np.abs(a - n)) / scale)


# ---------------------------------------------------------------------------
# per-component check of the training losses
# ---------------------------------------------------------------------------

COMPONENTS = ("cls", "adv", "bptri", "total")
GRADCHECK_TOLERANCE = 1e-4


def _component_losses(params, x, labels, domains, triplets, loss_cfg, grl_coeff):
    # imported here so the finite-difference helpers stay free of model code
    from . import losses as L
    from . import model as nets
    from . import tensor as T

    feats = nets.forward_features(params, x)
    logp = nets.class_logprobs(params, feats)
    src = np.flatnonzero(domains == 0)
    tgt = np.flatnonzero(domains == 1)
    l_cls = L.classification_loss(T.take_rows(logp, src), labels[src], T.take_rows(logp, tgt))
    l_adv = L.adversarial_loss(nets.domain_logprobs(params, feats, grl_coeff), domains)
    l_tri = L.bp_triplet_loss(L.TripletBatch(feats, triplets), loss_cfg)
    return {
        "cls": l_cls,
        "adv": l_adv,
        "bptri": l_tri,
        "total": L.total_loss(l_adv, l_tri, l_cls, loss_cfg),
    }


def check_loss_gradients(
    seed: int,
    batch_size: int = 8,
    dim: int = 4,
    grl_coeff: float = 0.7,
    h: float = DEFAULT_STEP,
) -> dict[str, float]:
    """Max relative error between tape and central-difference gradients per loss component.

    Uses a two-layer feature extractor, a linear classifier and a small
    discriminator on a random half-source, half-target batch. The difference
    quotient sees the discriminator loss without reversal, so its
    feature-extractor part is scaled by ``-grl_coeff`` before comparing.
    """
    from . import losses as L
    from . import mining as M
    from . import model as nets
    from . import tensor as T

    if batch_size < 4 or batch_size % 2:
        raise ValueError("batch_size must be even and >= 4")
    rng = np.random.default_rng(seed)
    params = nets.init_params(
        nets.MlpSpec((dim, 6, 5)), nets.MlpSpec((5, 3)), nets.MlpSpec((5, 4, 2)), seed
    )
    x = rng.standard_normal((batch_size, dim))
    labels = rng.permutation(np.resize(np.arange(3), batch_size))
    domains = np.repeat([0, 1], batch_size // 2)
    loss_cfg = L.LossConfig(margin=1.0, lambda1=0.5, lambda2=0.8)
    triplets = M.sample_triplets(labels, {0, 1, 2}, M.MiningConfig(n0=1), rng, domains)

    names = params.names()
    with T.Tape() as tape:
        comps = _component_losses(params, x, labels, domains, triplets, loss_cfg, grl_coeff)
    analytic = {}
    for c in COMPONENTS:
        params.zero_grad()
        tape.backward(comps[c])
        analytic[c] = [
            params[n].grad.copy() if params[n].grad is not None else np.zeros(params[n].shape)
            for n in names
        ]

    arrays = [np.array(params[n].data) for n in names]

    def fn():
        frozen = params.replace({n: T.Tensor(a, name=n) for n, a in zip(names, arrays)})
        out = _component_losses(frozen, x, labels, domains, triplets, loss_cfg, grl_coeff)
        return np.array([out[c].item() for c in COMPONENTS])

    numeric = numerical_gradient(fn, arrays, h)
    col = {c: i for i, c in enumerate(COMPONENTS)}
    errors = {}
    for c in COMPONENTS:
        a_parts, n_parts = [], []
        for name, a, g in zip(names, analytic[c], numeric):
            n = g[..., col[c]]
            if name.startswith("f."):
                adv = g[..., col["adv"]]
                if c == "adv":
                    n = -grl_coeff * adv
                elif c == "total":
                    n = n - (1.0 + grl_coeff) * loss_cfg.lambda1 * adv
            a_parts.append(a.ravel())
            n_parts.append(n.ravel())
        errors[c] = scaled_error(np.concatenate(a_parts), np.concatenate(n_parts))
    return errors


def gradcheck_report(seeds=range(20), **kwargs) -> dict[str, float]:
    """Worst error per component over several random models and batches."""
    worst = dict.fromkeys(COMPONENTS, 0.0)
    for seed in seeds:
        for c, e in check_loss_gradients(seed, **kwargs).items():
            worst[c] = max(worst[c], e)
    return worst
