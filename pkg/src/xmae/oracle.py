"""Exact-enumeration study of delay identifiability on small discrete
processes.

A hidden Markov chain S emits two observation streams: E_t from S_t and
P_t from S_{t-delay} (clamped at the start of the horizon). Every
expectation below is a finite sum over the full joint distribution, so
the delay-blindness of same-modality reconstruction and the
identifiability of the delay under cross-modal reconstruction can be
checked with zero estimation error."""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

ATOM_GUARD = 10 ** 7


class TooLarge(ValueError):
    pass


class ConstructionViolation(ValueError):
    pass


@dataclass(frozen=True)
class ToyProcess:
    """Discrete latent chain with per-modality scalar emissions.

    noise_flip_p > 0 replaces an emitted symbol, with that probability,
    by a uniform draw over the other symbols of its modality's alphabet.
    """
    n_states: int
    transition: tuple
    horizon: int
    delay: int
    emit_e: tuple
    emit_p: tuple
    noise_flip_p: float = 0.0
    init: tuple = None

    def __post_init__(self):
        k = self.n_states
        trans = np.asarray(self.transition, dtype=float)
        if trans.shape != (k, k):
            raise ValueError(f"transition must be {k}x{k}")
        if np.any(np.abs(trans.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition rows must sum to 1")
        if np.any(trans < 0):
            raise ValueError("transition probabilities must be nonnegative")
        if not 0 <= self.delay < self.horizon:
            raise ValueError("delay must lie in [0, horizon)")
        if len(self.emit_e) != k or len(self.emit_p) != k:
            raise ValueError("emission maps must cover every state")
        if not 0.0 <= self.noise_flip_p < 1.0:
            raise ValueError("flip probability must lie in [0, 1)")
        if self.init is None:
            object.__setattr__(self, "init", tuple([1.0 / k] * k))
        elif abs(sum(self.init) - 1.0) > 1e-12 or len(self.init) != k:
            raise ValueError("init must be a length-K distribution")

    def alphabet_e(self):
        return tuple(sorted(set(float(v) for v in self.emit_e)))

    def alphabet_p(self):
        return tuple(sorted(set(float(v) for v in self.emit_p)))

    def atom_count(self) -> int:
        n = self.n_states ** self.horizon
        if self.noise_flip_p > 0:
            n *= (len(self.alphabet_e()) * len(self.alphabet_p())) \
                ** self.horizon
        return n


def _latent_paths(tp: ToyProcess):
    """(path, probability) for every positive-probability latent path."""
    trans = np.asarray(tp.transition)
    for path in itertools.product(range(tp.n_states), repeat=tp.horizon):
        prob = tp.init[path[0]]
        for a, b in zip(path, path[1:]):
            prob *= trans[a, b]
            if prob == 0.0:
                break
        if prob > 0.0:
            yield path, prob


def _clean_emissions(tp: ToyProcess, path, delay):
    e = tuple(float(tp.emit_e[s]) for s in path)
    p = tuple(float(tp.emit_p[path[max(t - delay, 0)]])
              for t in range(tp.horizon))
    return e, p


def _flip_outcomes(clean, alphabet, p):
    """Per-coordinate symbol distributions under symmetric flip noise."""
    if p == 0.0:
        return [((clean_t, 1.0),) for clean_t in clean]
    others = {a: tuple(b for b in alphabet if b != a) for a in alphabet}
    out = []
    for c in clean:
        alts = others[c]
        if alts:
            out.append(((c, 1.0 - p),)
                       + tuple((a, p / len(alts)) for a in alts))
        else:
            out.append(((c, 1.0),))
    return out


def enumerate_joint(tp: ToyProcess, delay=None) -> dict:
    """Full joint over (latent path, E_{1..T}, P_{1..T}), as a dict
    keyed by (s, e, p) tuples. Probabilities sum to 1 within 1e-10."""
    if tp.atom_count() > ATOM_GUARD:
        raise TooLarge(f"{tp.atom_count()} atoms exceeds {ATOM_GUARD}")
    delay = tp.delay if delay is None else delay
    ae, ap = tp.alphabet_e(), tp.alphabet_p()
    joint = {}
    for path, prob in _latent_paths(tp):
        e_clean, p_clean = _clean_emissions(tp, path, delay)
        e_dists = _flip_outcomes(e_clean, ae, tp.noise_flip_p)
        p_dists = _flip_outcomes(p_clean, ap, tp.noise_flip_p)
        for e_combo in itertools.product(*e_dists):
            pe = math.prod(w for _, w in e_combo)
            e = tuple(v for v, _ in e_combo)
            for p_combo in itertools.product(*p_dists):
                pp = math.prod(w for _, w in p_combo)
                key = (path, e, tuple(v for v, _ in p_combo))
                joint[key] = joint.get(key, 0.0) + prob * pe * pp
    return joint


def _observable_marginal(joint):
    obs = {}
    for (_, e, p), prob in joint.items():
        obs[(e, p)] = obs.get((e, p), 0.0) + prob
    return obs


def _cross_predictor(tp: ToyProcess, visible_e, assumed_delay):
    """E[E_t | P_{1..T}, E_visible] for each masked t, under the model
    with the assumed delay. Returns (table, marginal-mean fallback)."""
    masked = [t for t in range(tp.horizon) if t not in visible_e]
    obs = _observable_marginal(enumerate_joint(tp, delay=assumed_delay))
    den, num = {}, {}
    marg_den, marg_num = 0.0, np.zeros(len(masked))
    for (e, p), prob in obs.items():
        key = (tuple(e[t] for t in sorted(visible_e)), p)
        masked_vals = np.array([e[t] for t in masked])
        den[key] = den.get(key, 0.0) + prob
        num[key] = num.get(key, 0.0) + prob * masked_vals
        marg_den += prob
        marg_num += prob * masked_vals
    table = {k: num[k] / den[k] for k in den}
    return masked, table, marg_num / marg_den


def bayes_risk_cross(tp: ToyProcess, visible_e, assumed_delay) -> float:
    """Expected squared error, under the true process, of the
    conditional-mean predictor built with the assumed delay. The
    predictor sees all of P and the visible ECG samples; the risk is
    summed over the masked ECG samples."""
    visible_e = frozenset(int(t) for t in visible_e)
    if not visible_e < set(range(tp.horizon)):
        raise ValueError("visible set must be a proper subset of 0..T-1")
    masked, table, fallback = _cross_predictor(tp, visible_e, assumed_delay)
    obs_true = _observable_marginal(enumerate_joint(tp))
    risk = 0.0
    vis_sorted = sorted(visible_e)
    for (e, p), prob in obs_true.items():
        key = (tuple(e[t] for t in vis_sorted), p)
        pred = table.get(key, fallback)
        truth = np.array([e[t] for t in masked])
        risk += prob * float(np.sum((truth - pred) ** 2))
    return risk


def _conditional_entropy_bits(obs_margin, t, visible):
    """H(X_t | X_visible) in bits for one modality's marginal table."""
    vis_sorted = sorted(visible)
    joint, cond = {}, {}
    for seq, prob in obs_margin.items():
        key = tuple(seq[i] for i in vis_sorted)
        joint[(key, seq[t])] = joint.get((key, seq[t]), 0.0) + prob
        cond[key] = cond.get(key, 0.0) + prob
    h = 0.0
    for (key, _), pj in joint.items():
        if pj > 0:
            h -= pj * math.log2(pj / cond[key])
    return h


def bayes_risk_mm(tp: ToyProcess, visible_e, visible_p):
    """(risk using both modalities, risk using same-modality only) for a
    process whose masked samples are determined by their visible
    same-modality neighbors. Both risks sum squared error over the
    masked samples of both modalities."""
    visible_e = frozenset(int(t) for t in visible_e)
    visible_p = frozenset(int(t) for t in visible_p)
    horizon = set(range(tp.horizon))
    if not (visible_e < horizon and visible_p < horizon):
        raise ValueError("visible sets must be proper subsets of 0..T-1")
    obs = _observable_marginal(enumerate_joint(tp))
    e_margin, p_margin = {}, {}
    for (e, p), prob in obs.items():
        e_margin[e] = e_margin.get(e, 0.0) + prob
        p_margin[p] = p_margin.get(p, 0.0) + prob
    for t in horizon - visible_e:
        h = _conditional_entropy_bits(e_margin, t, visible_e)
        if h > 1e-9:
            raise ConstructionViolation(
                f"masked E_{t} not determined by visible neighbors "
                f"(conditional entropy {h:.3g} bits)")
    for t in horizon - visible_p:
        h = _conditional_entropy_bits(p_margin, t, visible_p)
        if h > 1e-9:
            raise ConstructionViolation(
                f"masked P_{t} not determined by visible neighbors "
                f"(conditional entropy {h:.3g} bits)")

    masked_e = sorted(horizon - visible_e)
    masked_p = sorted(horizon - visible_p)
    vis_e, vis_p = sorted(visible_e), sorted(visible_p)

    def risk(keyfunc):
        den, num = {}, {}
        for (e, p), prob in obs.items():
            key = keyfunc(e, p)
            vals = np.array([e[t] for t in masked_e]
                            + [p[t] for t in masked_p])
            den[key] = den.get(key, 0.0) + prob
            num[key] = num.get(key, 0.0) + prob * vals
        table = {k: num[k] / den[k] for k in den}
        total = 0.0
        for (e, p), prob in obs.items():
            truth = np.array([e[t] for t in masked_e]
                             + [p[t] for t in masked_p])
            total += prob * float(np.sum((truth - table[keyfunc(e, p)]) ** 2))
        return total

    both = risk(lambda e, p: (tuple(e[t] for t in vis_e),
                              tuple(p[t] for t in vis_p)))
    # unimodal: E predicted from visible E, P from visible P, risks added
    den_e, num_e, den_p, num_p = {}, {}, {}, {}
    for (e, p), prob in obs.items():
        ke = tuple(e[t] for t in vis_e)
        kp = tuple(p[t] for t in vis_p)
        ve = np.array([e[t] for t in masked_e])
        vp = np.array([p[t] for t in masked_p])
        den_e[ke] = den_e.get(ke, 0.0) + prob
        num_e[ke] = num_e.get(ke, 0.0) + prob * ve
        den_p[kp] = den_p.get(kp, 0.0) + prob
        num_p[kp] = num_p.get(kp, 0.0) + prob * vp
    te = {k: num_e[k] / den_e[k] for k in den_e}
    tp_table = {k: num_p[k] / den_p[k] for k in den_p}
    uni = 0.0
    for (e, p), prob in obs.items():
        ve = np.array([e[t] for t in masked_e])
        vp = np.array([p[t] for t in masked_p])
        uni += prob * float(
            np.sum((ve - te[tuple(e[t] for t in vis_e)]) ** 2)
            + np.sum((vp - tp_table[tuple(p[t] for t in vis_p)]) ** 2))
    return both, uni


@dataclass(frozen=True)
class RiskCurve:
    assumed_delays: tuple
    risks: tuple

    def __post_init__(self):
        if len(self.assumed_delays) != len(self.risks):
            raise ValueError("delays and risks must align")
        if any(r < -1e-15 for r in self.risks):
            raise ValueError("risks must be nonnegative")

    @property
    def argmin_delay(self) -> int:
        return self.assumed_delays[int(np.argmin(self.risks))]

    @property
    def unique_argmin(self) -> bool:
        r = np.asarray(self.risks)
        return int(np.sum(r <= r.min() + 1e-12)) == 1

    def summary(self, true_delay) -> dict:
        by_delay = dict(zip(self.assumed_delays, self.risks))
        return {"argmin": int(self.argmin_delay),
                "unique": bool(self.unique_argmin),
                "risk_at_truth": float(by_delay[true_delay])}


def identifiability_scan(tp: ToyProcess, visible_e, delta_range) -> RiskCurve:
    """Bayes risk of the cross-modal predictor for each assumed delay."""
    delta_range = tuple(int(d) for d in delta_range)
    if not delta_range:
        raise ValueError("empty delay range")
    if min(delta_range) < 0 or max(delta_range) >= tp.horizon:
        raise ValueError("assumed delays must lie in [0, horizon)")
    risks = tuple(bayes_risk_cross(tp, visible_e, d) for d in delta_range)
    return RiskCurve(delta_range, risks)


def mc_risk_cross(tp: ToyProcess, visible_e, assumed_delay,
                  n_samples: int = 10 ** 6, seed: int = 0):
    """Monte-Carlo estimate of bayes_risk_cross with its standard error.
    Independent cross-check of the enumeration: samples come from the
    true process, the predictor comes from the exact table."""
    visible_e = frozenset(int(t) for t in visible_e)
    masked, table, fallback = _cross_predictor(tp, visible_e, assumed_delay)
    rng = np.random.default_rng(seed)
    trans = np.asarray(tp.transition)
    k, t_len = tp.n_states, tp.horizon
    ae, ap = tp.alphabet_e(), tp.alphabet_p()
    vis_sorted = sorted(visible_e)

    states = np.empty((n_samples, t_len), dtype=np.int64)
    states[:, 0] = rng.choice(k, size=n_samples, p=np.asarray(tp.init))
    cum = np.cumsum(trans, axis=1)
    for t in range(1, t_len):
        u = rng.random(n_samples)
        states[:, t] = (u[:, None] > cum[states[:, t - 1]]).sum(axis=1)
    emit_e = np.asarray(tp.emit_e, dtype=float)
    emit_p = np.asarray(tp.emit_p, dtype=float)
    e_obs = emit_e[states]
    src = np.maximum(np.arange(t_len) - tp.delay, 0)
    p_obs = emit_p[states[:, src]]
    if tp.noise_flip_p > 0:
        for obs, alphabet in ((e_obs, ae), (p_obs, ap)):
            if len(alphabet) < 2:
                continue
            alphabet = np.asarray(alphabet)
            flip = rng.random(obs.shape) < tp.noise_flip_p
            # uniform over the other symbols
            idx = np.searchsorted(alphabet, obs)
            shift = rng.integers(1, len(alphabet), size=obs.shape)
            obs[flip] = alphabet[(idx + shift)[flip] % len(alphabet)]

    sq = np.empty(n_samples)
    for i in range(n_samples):
        key = (tuple(e_obs[i, vis_sorted]), tuple(p_obs[i]))
        pred = table.get(key, fallback)
        truth = e_obs[i, masked]
        sq[i] = float(np.sum((truth - pred) ** 2))
    est = float(sq.mean())
    se = float(sq.std(ddof=1) / np.sqrt(n_samples))
    return est, se
