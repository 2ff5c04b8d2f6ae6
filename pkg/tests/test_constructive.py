import pytest

from app.core.constructive import (
    LEARNED,
    REFUTED,
    build_family_learner,
    build_single_learner,
    family_nominal_margin,
    single_learner_margin,
    tail_invariance_check,
    verify_eventual_learning,
)
from app.core.exceptions import AlphabetError, ModelConfigError, PreconditionError
from app.core.sequences import Alphabet, Constant, EventuallyPeriodic, IncreasingSpacing, Periodic
from app.core.transformer import check_compactness


class TestSingleLearner:
    """Testes do learner de uma sequência"""

    def test_margin_formula(self):
        """Testa (1 - eta) - eta / (|Sigma| - 1)"""
        assert single_learner_margin(0.1, 2) == pytest.approx(0.8)
        assert single_learner_margin(0.1, 3) == pytest.approx(0.85)

    def test_learns_target(self, single_zero):
        """Testa 0^omega aprendido com margem 0.8"""
        witness = verify_eventual_learning(single_zero, Constant("0"), 0.8, 1, 2000)
        assert witness.verdict == LEARNED
        assert witness.min_margin == pytest.approx(0.8)
        assert witness.first_failing_n is None

    def test_learns_eventually_periodic(self):
        """Testa alvo com preâmbulo"""
        target = EventuallyPeriodic("110", "01")
        model = build_single_learner(target, eta=0.2)
        assert verify_eventual_learning(model, target, 0.5, 1, 300).learned

    def test_refutes_isolated_variant(self, single_zero):
        """Testa (0^{k-1} 1)^omega refutado em n = k - 1"""
        for k in (2, 5, 9):
            witness = verify_eventual_learning(single_zero, Periodic("0" * (k - 1) + "1"), 0.1, 1, 100)
            assert witness.verdict == REFUTED
            assert witness.first_failing_n == k - 1

    def test_refutes_sparse(self, single_zero):
        """Testa sequência de espaçamento crescente"""
        witness = verify_eventual_learning(single_zero, IncreasingSpacing(), 0.1, 1, 100)
        assert witness.first_failing_n == 2

    def test_compact(self, single_zero):
        """Testa limites declarados"""
        assert check_compactness(single_zero, 500).passed

    def test_ternary(self):
        """Testa alfabeto de três símbolos"""
        abc = Alphabet(("a", "b", "c"))
        model = build_single_learner(Periodic("abc"), eta=0.1, alphabet=abc)
        probs = model.distribution("ab").probs
        assert probs[2] == pytest.approx(0.9)
        assert probs[0] == pytest.approx(0.05)

    def test_bad_eta(self):
        """Testa eta fora de (0, 1/2)"""
        with pytest.raises(ModelConfigError):
            build_single_learner(Constant("0"), eta=0.5)

    def test_needs_periodic_target(self):
        """Testa alvo esparso"""
        with pytest.raises(ModelConfigError):
            build_single_learner(IncreasingSpacing())

    def test_symbol_outside_alphabet(self):
        """Testa alvo com símbolo desconhecido"""
        with pytest.raises(AlphabetError):
            build_single_learner(Constant("2"))


class TestFamilyLearner:
    """Testes do learner de família finita"""

    def test_nominal_margin(self):
        """Testa tanh(beta / 2) crescente em beta"""
        assert family_nominal_margin(16.0) >= family_nominal_margin(4.0)
        assert family_nominal_margin(20.0) == pytest.approx(1.0, abs=1e-8)

    def test_layer_count(self, family_235):
        """Testa 2m + 2 camadas"""
        assert len(family_235.layers) == 8

    @pytest.mark.parametrize("pattern", ["01", "001", "00001"])
    def test_learns_members(self, family_235, pattern):
        """Testa cada membro aprendido a partir de n0 = 20"""
        witness = verify_eventual_learning(family_235, Periodic(pattern), 0.5, 20, 1000)
        assert witness.learned, witness.to_dict()

    def test_two_periods(self):
        """Testa família {2, 3} em (01)^omega"""
        model = build_family_learner([2, 3])
        assert verify_eventual_learning(model, Periodic("01"), 0.5, 16, 400).learned

    def test_refutes_period_outside_family(self, family_235):
        """Testa período 7 refutado: todo candidato prevê 0 onde cabe 1"""
        witness = verify_eventual_learning(family_235, Periodic("0000001"), 0.5, 20, 1000)
        assert witness.verdict == REFUTED

    def test_compact(self, family_235):
        """Testa limites declarados"""
        assert check_compactness(family_235, 200).passed

    def test_duplicate_periods(self):
        """Testa períodos repetidos"""
        with pytest.raises(ModelConfigError):
            build_family_learner([2, 2])

    def test_period_too_small(self):
        """Testa período 1"""
        with pytest.raises(ModelConfigError):
            build_family_learner([1, 3])

    def test_lag_below_period(self):
        """Testa L menor que o maior período"""
        with pytest.raises(ModelConfigError):
            build_family_learner([2, 5], max_lag=4)


class TestVerification:
    """Testes do verificador e da invariância por diferenças finitas"""

    def test_bad_epsilon(self, single_zero):
        """Testa epsilon <= 0"""
        with pytest.raises(PreconditionError):
            verify_eventual_learning(single_zero, Constant("0"), 0.0, 1, 10)

    def test_bad_window(self, single_zero):
        """Testa n0 > N"""
        with pytest.raises(PreconditionError):
            verify_eventual_learning(single_zero, Constant("0"), 0.1, 11, 10)

    def test_witness_dict(self, single_zero):
        """Testa serialização do witness"""
        data = verify_eventual_learning(single_zero, Constant("0"), 0.5, 1, 10).to_dict()
        assert data["verdict"] == LEARNED
        assert data["n0"] == 1

    def test_tail_pair_agrees(self, single_zero):
        """Testa par com diferenças finitas: mesmo veredicto após a última diferença"""
        report = tail_invariance_check(single_zero, Constant("0"), EventuallyPeriodic("111", "0"), 0.5, 4, 500)
        assert report.passed
        assert report.last_difference == 3
        assert report.witness_a.learned and report.witness_b.learned

    def test_tail_pair_family(self, family_235):
        """Testa par periódico com preâmbulo diferente"""
        report = tail_invariance_check(family_235, Periodic("01"), EventuallyPeriodic("11", "01"), 0.5, 20, 300)
        assert report.passed
        assert report.to_dict()["passed"] is True

    def test_tail_pair_needs_finite_difference(self, single_zero):
        """Testa par com infinitas diferenças"""
        with pytest.raises(PreconditionError):
            tail_invariance_check(single_zero, Constant("0"), Periodic("01"), 0.5, 1, 10)
