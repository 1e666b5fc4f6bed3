import numpy as np
import pytest

from summarybnn import prior_derivation as P
from summarybnn import tensor as T
from summarybnn.distributions import BetaParams, beta_pdf


class TestForwardMap:
    def test_uniform_density(self):
        # Uniform scores: half the mass below 1/2, accuracy 0.375 + 0.375.
        gamma0, acc = P.forward_map(BetaParams(1.0, 1.0))
        assert gamma0 == pytest.approx(0.5, abs=1e-6)
        assert acc == pytest.approx(0.75, abs=1e-6)

    def test_symmetric_beta(self):
        gamma0, acc = P.forward_map(BetaParams(5.0, 5.0))
        assert gamma0 == pytest.approx(0.5, abs=1e-9)
        xs = np.linspace(1e-9, 1 - 1e-9, 10**6)
        f = beta_pdf(BetaParams(5.0, 5.0), xs)
        oracle = np.trapezoid(np.where(xs < 0.5, (1 - xs) * f, xs * f), xs)
        assert acc == pytest.approx(oracle, abs=1e-7)

    def test_bathtub_density_is_nearly_always_confident(self):
        # Mass piles at the endpoints; the exact value via the regularized
        # incomplete-Beta identity E_a = F(1/2; a,b) + mu - 2 mu F(1/2; a+1,b)
        # is 0.94157569..., comfortably close to 1.
        from scipy import special

        a = b = 0.1
        mu = a / (a + b)
        closed = special.betainc(a, b, 0.5) + mu - 2 * mu * special.betainc(a + 1, b, 0.5)
        _, acc = P.forward_map(BetaParams(a, b))
        assert acc == pytest.approx(closed, abs=1e-8)
        assert acc > 0.9

    def test_accuracy_range_invariant(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            params = BetaParams(*rng.uniform(0.3, 9.0, size=2))
            _, acc = P.forward_map(params)
            assert 0.5 <= acc < 1.0

    def test_deterministic(self):
        p = BetaParams(2.5, 4.0)
        assert P.forward_map(p) == P.forward_map(p)


class TestSolvePrior:
    def test_recovers_uniform(self):
        result = P.solve_prior(P.PriorKnowledge(0.5, 0.75))
        gamma0, acc = P.forward_map(result.params)
        assert abs(gamma0 - 0.5) < 1e-6 and abs(acc - 0.75) < 1e-6
        assert result.residual < P.SOLVED_RESIDUAL

    def test_round_trip_through_forward_map(self):
        gamma0, acc = P.forward_map(BetaParams(2.0, 7.0))
        result = P.solve_prior(P.PriorKnowledge(1.0 - gamma0, acc))
        g2, a2 = P.forward_map(result.params)
        assert abs(g2 - gamma0) < 1e-3 and abs(a2 - acc) < 1e-3

    def test_imbalanced_confident_target(self):
        result = P.solve_prior(P.PriorKnowledge(0.1, 0.97))
        gamma0, acc = P.forward_map(result.params)
        assert abs(gamma0 - 0.9) < 1e-3
        assert abs(acc - 0.97) < 1e-3

    def test_round_trip_property_over_parameter_box(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            a, b = rng.uniform(0.5, 10.0, size=2)
            if a < b:  # keep gamma0 >= 0.5 so it is valid prior knowledge
                a, b = b, a
            gamma0, acc = P.forward_map(BetaParams(b, a))
            gamma0 = min(max(gamma0, 0.5), 1 - 1e-9)
            result = P.solve_prior(P.PriorKnowledge(1.0 - gamma0, acc))
            g2, a2 = P.forward_map(result.params)
            assert abs(g2 - gamma0) < 1e-3 and abs(a2 - acc) < 1e-3

    def test_deterministic_given_fixed_starts(self):
        k = P.PriorKnowledge(0.3, 0.9)
        r1, r2 = P.solve_prior(k), P.solve_prior(k)
        assert r1.params == r2.params and r1.residual == r2.residual

    def test_infeasible_target_reports_best_candidate(self):
        # Accuracy a hair above 1/2 needs a delta spike at the threshold while
        # 0.99 majority mass needs that spike fully below it; within the
        # solver's parameter box no Beta reconciles the two.
        with pytest.raises(P.InfeasibleTargetError) as exc:
            P.solve_prior(P.PriorKnowledge(0.01, 0.5005))
        assert isinstance(exc.value.best, P.PriorSolveResult)
        assert exc.value.best.residual >= P.FEASIBLE_RESIDUAL

    def test_knowledge_validation(self):
        with pytest.raises(T.DomainError):
            P.PriorKnowledge(0.6, 0.9)
        with pytest.raises(T.DomainError):
            P.PriorKnowledge(0.3, 0.5)
        with pytest.raises(T.DomainError):
            P.PriorKnowledge(0.0, 0.9)
