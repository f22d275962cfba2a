"""Synthetic pre-promotion data from a known structural model.

Generation law, per click:

    x    ~ N(0, I_d)                   context features
    disc ~ Uniform(0, 1)               discount depth shown with the item
    p_a  = sigmoid(w_a . x)            cart propensity
    A    ~ Bernoulli(p_a)              add-to-cart indicator
    t_u  = trait_scale * N(0, 1)       per-user deal-seeking trait
    q_dir = scale * sigmoid(w_dir . x + b_dir)
    q_del = scale * sigmoid(w_del . x + tau * A + gamma * disc + t_u + b_del)
    outcome ~ Categorical(direct: q_dir, delayed: q_del, none: rest)

Daily mode forces q_del = 0 (nobody waits for a promotion that is not
coming) and uses its own direct-rate bias. scale <= 0.5 keeps
q_dir + q_del < 1 pointwise. The add-to-cart effect tau and the discount
effect gamma exist only in the delayed head: a model trained on daily data
never observes either mechanism.

The trait t_u makes the tendency to postpone purchases a stable property of
the user, observable only through user identity, which reaches the
predictor through the personalized gates alone. trait_scale = 0 switches
the heterogeneity off.

Because every probability is known, each sample carries its ground truth
(propensity, both potential outcomes, individual causal effect), which the
estimator tests use as oracles. The delayed-outcome weights w_del share
directions with w_a (confounding the cart action) and, more weakly, with
w_dir; the naive treated-minus-control contrast is biased by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import (ActionEvent, ClickSample, GroundTruth, PromotionCalendar,
                   SECONDS_PER_DAY)
from .errors import ConfigError, UsageError


def default_calendar() -> PromotionCalendar:
    """30 daily-training days, a 3-day pre-promotion window, one promotion day."""
    return PromotionCalendar(daily_train_range=(0, 29), pre_promo_range=(30, 32),
                             promo_days=frozenset({33}))


@dataclass(slots=True)
class WorldParams:
    d: int
    w_a: np.ndarray
    w_dir: np.ndarray
    w_del: np.ndarray
    b_dir_daily: float
    b_dir_pre: float
    b_del: float
    tau: float
    gamma: float
    scale: float
    trait_scale: float = 1.2
    trait_seed: int = 0
    direct_rate_daily: float = 0.02
    direct_rate_pre: float = 0.007
    delayed_rate_pre: float = 0.012


def user_traits(world: WorldParams, n_users: int) -> np.ndarray:
    """Per-user deal-seeking logit offsets t_u; a fixed function of the world."""
    rng = np.random.default_rng(np.random.SeedSequence([world.trait_seed, n_users]))
    return world.trait_scale * rng.standard_normal(n_users)


@dataclass(slots=True)
class GenConfig:
    """Population shape: who clicks what, and how busy the log is."""

    n_users: int = 1000
    n_items: int = 2000
    n_categories: int = 50
    max_seq_len: int = 10
    calendar: PromotionCalendar = field(default_factory=default_calendar)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _solve_bias(z: np.ndarray, scale: float, target: float) -> float:
    """Bisect b so that mean(scale * sigmoid(z + b)) == target."""
    if not 0.0 < target < scale:
        raise ConfigError(f"target rate {target} not reachable with scale {scale}")
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(np.mean(scale * _sigmoid(z + mid))) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_world(seed: int, d: int = 16, tau: float = 2.0, scale: float = 0.3,
                 gamma: float = 1.5, confound_atc: float = 0.7,
                 confound_dir: float = 0.4, trait_scale: float = 1.2,
                 direct_rate_daily: float = 0.02, direct_rate_pre: float = 0.007,
                 delayed_rate_pre: float = 0.012, bias_mc: int = 20000
                 ) -> WorldParams:
    """Draw world weights and solve biases for the configured base rates.

    Weights are i.i.d. normal scaled by 1/sqrt(d). The delayed head reuses
    the cart-propensity direction (weight `confound_atc`) and the direct
    direction (`confound_dir`); the remainder is a fresh direction invisible
    to any daily-trained model.
    """
    if d < 2:
        raise ConfigError(f"feature dimension must be >= 2, got {d}")
    if not 0.0 < scale <= 0.5:
        raise ConfigError(f"scale must be in (0, 0.5], got {scale}")
    rho2 = confound_atc ** 2 + confound_dir ** 2
    if rho2 >= 1.0:
        raise ConfigError("confound_atc^2 + confound_dir^2 must be < 1")

    rng = np.random.default_rng(seed)
    w_a = rng.standard_normal(d) / np.sqrt(d)
    w_dir = rng.standard_normal(d) / np.sqrt(d)
    fresh = rng.standard_normal(d) / np.sqrt(d)

    u_a = w_a / np.linalg.norm(w_a)
    v_dir = w_dir - (w_dir @ u_a) * u_a
    u_dir = v_dir / np.linalg.norm(v_dir)
    v_f = fresh - (fresh @ u_a) * u_a - (fresh @ u_dir) * u_dir
    u_f = v_f / np.linalg.norm(v_f)
    w_del = (confound_atc * u_a + confound_dir * u_dir
             + np.sqrt(1.0 - rho2) * u_f)

    # Bias calibration on a dedicated Monte Carlo draw.
    x = rng.standard_normal((bias_mc, d))
    disc = rng.uniform(size=bias_mc)
    a = (rng.uniform(size=bias_mc) < _sigmoid(x @ w_a)).astype(np.float64)
    t = trait_scale * rng.standard_normal(bias_mc)
    b_dir_daily = _solve_bias(x @ w_dir, scale, direct_rate_daily)
    b_dir_pre = _solve_bias(x @ w_dir, scale, direct_rate_pre)
    b_del = _solve_bias(x @ w_del + tau * a + gamma * disc + t, scale,
                        delayed_rate_pre)

    return WorldParams(d=d, w_a=w_a, w_dir=w_dir, w_del=w_del,
                       b_dir_daily=b_dir_daily, b_dir_pre=b_dir_pre, b_del=b_del,
                       tau=tau, gamma=gamma, scale=scale,
                       trait_scale=trait_scale, trait_seed=seed,
                       direct_rate_daily=direct_rate_daily,
                       direct_rate_pre=direct_rate_pre,
                       delayed_rate_pre=delayed_rate_pre)


def generate_dataset(world: WorldParams, n: int, mode: str, seed: int,
                     gen: GenConfig | None = None) -> list[ClickSample]:
    """Generate n clicks in time order, with labels, truth, and user histories.

    Each (user, item) pair is clicked at most once, so the event-log
    serialization of a dataset has unambiguous purchase attribution.
    """
    if n < 1:
        raise UsageError(f"n must be >= 1, got {n}")
    if mode not in ("daily", "prepromo"):
        raise ConfigError(f"mode must be 'daily' or 'prepromo', got {mode!r}")
    gen = gen or GenConfig()
    cal = gen.calendar
    if mode == "daily":
        day_lo, day_hi = cal.daily_train_range
        b_dir = world.b_dir_daily
    else:
        day_lo, day_hi = cal.pre_promo_range
        b_dir = world.b_dir_pre
    n_days = day_hi - day_lo + 1
    if n > n_days * (SECONDS_PER_DAY - 2):
        raise ConfigError(f"{n} samples do not fit {n_days} day(s) at one-second slots")

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, world.d))
    disc = rng.uniform(size=n)
    p_a = _sigmoid(x @ world.w_a)
    A = (rng.uniform(size=n) < p_a).astype(np.int64)
    q_dir = world.scale * _sigmoid(x @ world.w_dir + b_dir)

    days = np.sort(rng.integers(day_lo, day_hi + 1, size=n)).tolist()
    users = rng.integers(0, gen.n_users, size=n).tolist()
    items = rng.integers(0, gen.n_items, size=n).tolist()

    # First pass: resolve (user, item) uniqueness and time slots, so the
    # user-trait lookup below sees the final assignment.
    clicked: set[tuple[int, int]] = set()
    slots: list[int] = []
    slot = 0
    prev_day = None
    for i in range(n):
        day = days[i]
        if day != prev_day:
            slot, prev_day = 0, day
        slot += 1
        if slot >= SECONDS_PER_DAY - 1:
            raise ConfigError(f"day {day} overflowed its one-second slots")
        slots.append(slot)
        uid = users[i]
        item = items[i]
        tries = 0
        while (uid, item) in clicked:
            item = int(rng.integers(0, gen.n_items))
            tries += 1
            if tries > 200:
                uid = int(rng.integers(0, gen.n_users))
                tries = 0
        clicked.add((uid, item))
        users[i] = uid
        items[i] = item

    traits = user_traits(world, gen.n_users)
    z_del = (x @ world.w_del + world.gamma * disc
             + traits[np.asarray(users)] + world.b_del)
    if mode == "prepromo":
        mu1 = world.scale * _sigmoid(z_del + world.tau)
        mu0 = world.scale * _sigmoid(z_del)
        q_del = np.where(A == 1, mu1, mu0)
    else:
        mu1 = np.zeros(n)
        mu0 = np.zeros(n)
        q_del = np.zeros(n)
    u = rng.uniform(size=n)
    direct = u < q_dir
    delayed = ~direct & (u < q_dir + q_del)

    # Bulk-convert the vectorized draws once; per-element casts dominate
    # the loop otherwise.
    disc_l = disc.tolist()
    p_a_l = p_a.tolist()
    a_l = A.tolist()
    mu1_l = mu1.tolist()
    mu0_l = mu0.tolist()
    q_dir_l = q_dir.tolist()
    direct_l = direct.tolist()
    delayed_l = delayed.tolist()
    user_names = [f"u{k}" for k in range(gen.n_users)]
    item_names = [f"i{k}" for k in range(gen.n_items)]
    cat_names = [f"c{k % gen.n_categories}" for k in range(gen.n_items)]

    samples: list[ClickSample] = []
    atc_hist: dict[int, list[str]] = {}
    pay_hist: dict[int, list[str]] = {}
    L = gen.max_seq_len
    for i in range(n):
        uid = users[i]
        item = items[i]
        item_id = item_names[item]
        ts = days[i] * SECONDS_PER_DAY + slots[i]

        ua = atc_hist.get(uid)
        up = pay_hist.get(uid)
        is_direct = direct_l[i]
        sample = ClickSample(
            user_id=user_names[uid], item_id=item_id,
            category_id=cat_names[item],
            click_ts=ts, click_day=day, price=0.0, discount=disc_l[i],
            A=a_l[i],
            y_all=1 if (is_direct or delayed_l[i]) else 0,
            y_delay=1 if delayed_l[i] else 0,
            atc_seq=tuple(ua[-L:][::-1]) if ua else (),
            pay_seq=tuple(up[-L:][::-1]) if up else (),
            features=x[i],
            truth=GroundTruth(
                p_a_true=p_a_l[i], mu1_true=mu1_l[i], mu0_true=mu0_l[i],
                q_dir_true=q_dir_l[i], ice_true=mu1_l[i] - mu0_l[i]))
        samples.append(sample)
        if a_l[i]:
            atc_hist.setdefault(uid, []).append(item_id)
        if is_direct:
            pay_hist.setdefault(uid, []).append(item_id)
    return samples


def true_ate(samples) -> float:
    """Mean individual causal effect over a generated dataset."""
    if not samples:
        raise UsageError("true_ate of an empty dataset")
    for s in samples:
        if s.truth is None:
            raise UsageError("true_ate requires samples with ground truth")
    return float(np.mean([s.truth.ice_true for s in samples]))


# ---------------------------------------------------------------------------
# Serialization: samples -> event log + ground-truth sidecar
# ---------------------------------------------------------------------------

def sample_id(s: ClickSample) -> str:
    return f"{s.user_id}:{s.item_id}:{s.click_ts}"


def samples_to_events(samples, calendar: PromotionCalendar) -> list[ActionEvent]:
    """Expand samples into the click/atc/buy events that would have produced them.

    Carted items get an atc event at the click instant; direct conversions a
    same-second purchase; delayed conversions a purchase on the first
    promotion day, at a per-sample offset.
    """
    events: list[ActionEvent] = []
    promo_day = min(calendar.promo_days)
    delayed_slot = 0
    for s in samples:
        events.append(ActionEvent(s.user_id, s.item_id, s.category_id, "click",
                                  s.click_ts, price=s.price, discount=s.discount))
        if s.A:
            events.append(ActionEvent(s.user_id, s.item_id, s.category_id, "atc",
                                      s.click_ts))
        if s.y_all and not s.y_delay:
            events.append(ActionEvent(s.user_id, s.item_id, s.category_id, "buy",
                                      s.click_ts))
        elif s.y_delay:
            delayed_slot += 1
            ts = promo_day * SECONDS_PER_DAY + delayed_slot
            events.append(ActionEvent(s.user_id, s.item_id, s.category_id, "buy", ts))
    return events


GROUND_TRUTH_COLUMNS = ("sample_id", "p_a_true", "mu1_true", "mu0_true", "ice_true")


def write_ground_truth_csv(samples, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(GROUND_TRUTH_COLUMNS)
        for s in samples:
            t = s.truth
            writer.writerow([sample_id(s), repr(t.p_a_true), repr(t.mu1_true),
                             repr(t.mu0_true), repr(t.ice_true)])
