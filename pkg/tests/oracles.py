"""Independent oracles used by the test suite.

These deliberately avoid the library's own fast paths: finite differences
instead of backprop, O(n^2) pair counting instead of rank sums, and a direct
per-click scan instead of the grouped label derivation.
"""

from __future__ import annotations

import numpy as np

from prepromo import autodiff as ad


def finite_difference_grads(loss_fn, params, step: float = 1e-5):
    """Central finite differences of a scalar loss w.r.t. every parameter entry.

    loss_fn rebuilds the forward pass from current parameter data and returns
    a float. Parameters are perturbed in place and restored.
    """
    grads = {}
    for p in params:
        if not p.trainable:
            continue
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads[p.name] = g
    return grads


def max_grad_mismatch(analytic: dict, numeric: dict, floor: float = 1e-4) -> float:
    """Worst relative error between two gradient maps.

    The denominator is floored so that near-zero gradients are compared at an
    absolute scale resolvable by 64-bit central differences.
    """
    worst = 0.0
    for name, num in numeric.items():
        ana = analytic.get(name)
        assert ana is not None, f"missing analytic gradient for {name}"
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst


def gradcheck(loss_builder, params, step: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare backprop against finite differences; returns the worst error."""
    loss = loss_builder()
    analytic = ad.backward(loss, params)
    numeric = finite_difference_grads(lambda: float(loss_builder().data), params, step)
    err = max_grad_mismatch(analytic, numeric)
    assert err < tol, f"gradient mismatch {err:.3e} >= {tol}"
    return err


def brute_force_auc(pos_scores, neg_scores) -> float:
    """O(n^2) pairwise win rate with ties counted 0.5."""
    total = 0.0
    for p in pos_scores:
        for n in neg_scores:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos_scores) * len(neg_scores))


def brute_force_labels(clicks, purchases, calendar, count_intermediate_as_all=False):
    """Direct per-click label derivation.

    Attribution is recomputed from scratch for every purchase: scan all
    clicks of the same (user, item) and take the latest one at or before the
    purchase. A purchase feeds at most one click. Each click then takes its
    label from the earliest attributed purchase that qualifies: same calendar
    day -> direct, promotion day -> delayed.
    """
    owned = {id(c): [] for c in clicks}
    for p in purchases:
        best = None
        for c in clicks:
            if (c.user_id, c.item_id) != (p.user_id, p.item_id):
                continue
            if c.timestamp > p.timestamp:
                continue
            if best is None or c.timestamp > best.timestamp:
                best = c
            elif c.timestamp == best.timestamp:
                best = c  # same instant: either click is "latest"; scan order ties
        if best is not None:
            owned[id(best)].append(p)

    labels = {}
    daily_lo, daily_hi = calendar.daily_train_range
    pre_lo, pre_hi = calendar.pre_promo_range
    for c in clicks:
        day = calendar.day_of(c.timestamp)
        if not (daily_lo <= day <= daily_hi or pre_lo <= day <= pre_hi):
            continue
        in_daily = daily_lo <= day <= daily_hi
        y_all, y_delay = 0, 0
        for p in sorted(owned[id(c)], key=lambda e: e.timestamp):
            p_day = calendar.day_of(p.timestamp)
            if p_day == day:
                y_all, y_delay = 1, 0
                break
            if in_daily:
                continue
            if p_day in calendar.promo_days:
                y_all, y_delay = 1, 1
                break
            if count_intermediate_as_all and p_day > day:
                y_all, y_delay = 1, 0
                break
        labels[id(c)] = (y_all, y_delay)
    return labels
