"""Exact-enumeration oracle: joint distribution bookkeeping, delay
identifiability, the self-sufficiency construction, and the Monte-Carlo
cross-check."""

import numpy as np
import pytest

from xmae import oracle


def chain(k=2, horizon=4, delay=1, flip=0.0, trans=None, emit_e=None,
          emit_p=None, init=None):
    if trans is None:
        trans = ((0.1, 0.9), (0.9, 0.1)) if k == 2 else None
    if emit_e is None:
        emit_e = tuple(float(s) for s in range(k))
    if emit_p is None:
        emit_p = tuple(10.0 + s for s in range(k))
    return oracle.ToyProcess(n_states=k, transition=trans, horizon=horizon,
                             delay=delay, emit_e=emit_e, emit_p=emit_p,
                             noise_flip_p=flip, init=init)


class TestProcessValidation:
    def test_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            chain(trans=((0.5, 0.4), (0.9, 0.1)))

    def test_delay_bounds(self):
        with pytest.raises(ValueError):
            chain(delay=4, horizon=4)

    def test_negative_probability(self):
        with pytest.raises(ValueError):
            chain(trans=((1.1, -0.1), (0.5, 0.5)))

    def test_default_init_uniform(self):
        assert chain().init == (0.5, 0.5)


class TestEnumeration:
    def test_path_count_two_states_four_steps(self):
        joint = oracle.enumerate_joint(chain())
        paths = {s for s, _, _ in joint}
        assert len(paths) == 16

    def test_probabilities_sum_to_one(self):
        for flip in (0.0, 0.12):
            joint = oracle.enumerate_joint(chain(flip=flip))
            assert abs(sum(joint.values()) - 1.0) < 1e-10

    def test_absorbing_chain_single_path(self):
        tp = chain(trans=((1.0, 0.0), (0.0, 1.0)), init=(1.0, 0.0))
        joint = oracle.enumerate_joint(tp)
        assert len(joint) == 1
        ((path, e, p),) = joint
        assert path == (0, 0, 0, 0)
        assert e == (0.0, 0.0, 0.0, 0.0)

    def test_flip_marginal_hand_value(self):
        # deterministic state 0 with flip 0.34: P(E_t = 0) = 0.66
        tp = chain(trans=((1.0, 0.0), (0.0, 1.0)), init=(1.0, 0.0),
                   flip=0.34, horizon=2, delay=0)
        joint = oracle.enumerate_joint(tp)
        p0 = sum(prob for (_, e, _), prob in joint.items() if e[0] == 0.0)
        assert abs(p0 - 0.66) < 1e-12

    def test_delayed_emission_clamps_at_start(self):
        # with delay 2, P_0 and P_1 both read the state at time 0
        tp = chain(delay=2)
        joint = oracle.enumerate_joint(tp)
        for (path, _, p), prob in joint.items():
            assert p[0] == p[1] == 10.0 + path[0]

    def test_atom_guard(self):
        big = oracle.ToyProcess(
            n_states=4, transition=tuple((0.25,) * 4 for _ in range(4)),
            horizon=12, delay=1, emit_e=(0.0, 1.0, 2.0, 3.0),
            emit_p=(0.0, 1.0, 2.0, 3.0))
        with pytest.raises(oracle.TooLarge):
            oracle.enumerate_joint(big)


class TestCrossRisk:
    def test_truth_minimizes_risk(self):
        tp = chain(horizon=5, delay=2)
        curve = oracle.identifiability_scan(tp, {0}, range(5))
        r_true = dict(zip(curve.assumed_delays, curve.risks))[2]
        assert all(r_true <= r + 1e-12 for r in curve.risks)

    def test_unique_argmin_informative_chain(self):
        tp = chain(horizon=5, delay=2)
        curve = oracle.identifiability_scan(tp, {0}, range(5))
        assert curve.unique_argmin
        assert curve.argmin_delay == 2

    def test_uninformative_ppg_flat_curve(self):
        # both states emit the same PPG value, so the assumed delay
        # cannot matter
        tp = chain(horizon=4, delay=1, emit_p=(10.0, 10.0))
        curve = oracle.identifiability_scan(tp, {0}, range(4))
        assert np.ptp(curve.risks) < 1e-12
        assert not curve.unique_argmin

    def test_deterministic_chain_zero_at_truth(self):
        # period-2 flip chain: the true delay reconstructs exactly, and
        # every mismatched delay produces observation keys the assumed
        # model never saw, so they all share the marginal-fallback risk
        tp = chain(trans=((0.0, 1.0), (1.0, 0.0)), horizon=6, delay=1)
        curve = oracle.identifiability_scan(tp, {0}, range(6))
        by = dict(zip(curve.assumed_delays, curve.risks))
        assert by[1] < 1e-12
        wrong = [by[d] for d in (0, 2, 3, 4, 5)]
        assert np.ptp(wrong) < 1e-12
        assert wrong[0] > 0.1

    def test_visible_set_must_be_proper(self):
        with pytest.raises(ValueError):
            oracle.bayes_risk_cross(chain(), {0, 1, 2, 3}, 1)

    def test_single_point_range(self):
        tp = chain(horizon=4, delay=1)
        curve = oracle.identifiability_scan(tp, {0}, [1])
        assert curve.argmin_delay == 1
        assert curve.unique_argmin

    def test_summary_keys(self):
        tp = chain(horizon=4, delay=1)
        s = oracle.identifiability_scan(tp, {0}, range(4)).summary(1)
        assert set(s) == {"argmin", "unique", "risk_at_truth"}
        assert s["argmin"] == 1 and s["unique"]


class TestMmRisk:
    @staticmethod
    def period2():
        # deterministic alternation: any sample is determined by any
        # other same-modality sample
        return chain(trans=((0.0, 1.0), (1.0, 0.0)), horizon=4, delay=1)

    def test_self_sufficiency_no_cross_gain(self):
        both, uni = oracle.bayes_risk_mm(self.period2(), {0, 2}, {1, 3})
        assert abs(both - uni) < 1e-12
        assert uni < 1e-12

    def test_gain_constant_over_delay(self):
        # the invariance underpinning the baseline comparison: when each
        # modality determines its own masked samples, the cross gain
        # stays zero for any true delay
        gaps = []
        for delay in range(4):
            tp = chain(trans=((0.0, 1.0), (1.0, 0.0)), horizon=4,
                       delay=delay)
            both, uni = oracle.bayes_risk_mm(tp, {0, 2}, {1, 3})
            gaps.append(uni - both)
        assert np.ptp(gaps) < 1e-12

    def test_violation_detected(self):
        # a mixing chain leaves masked samples genuinely uncertain
        with pytest.raises(oracle.ConstructionViolation):
            oracle.bayes_risk_mm(chain(horizon=4, delay=1), {0, 2}, {1, 3})


class TestMonteCarlo:
    def test_matches_enumeration_within_three_se(self):
        tp = chain(horizon=5, delay=2, flip=0.1)
        exact = oracle.bayes_risk_cross(tp, {0}, 2)
        est, se = oracle.mc_risk_cross(tp, {0}, 2, n_samples=40000, seed=5)
        assert se > 0
        assert abs(est - exact) < 3 * se

    def test_seeded_reproducibility(self):
        tp = chain(horizon=4, delay=1)
        a = oracle.mc_risk_cross(tp, {0}, 1, n_samples=2000, seed=9)
        b = oracle.mc_risk_cross(tp, {0}, 1, n_samples=2000, seed=9)
        assert a == b


class TestRiskCurve:
    def test_alignment_checked(self):
        with pytest.raises(ValueError):
            oracle.RiskCurve((0, 1), (0.5,))

    def test_negative_risk_rejected(self):
        with pytest.raises(ValueError):
            oracle.RiskCurve((0,), (-1.0,))
