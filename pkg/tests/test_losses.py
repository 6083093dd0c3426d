import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semlink import autodiff as ad
from semlink import losses as ls
from semlink.autodiff import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def random_distributions(gen, n, e):
    logits = gen.normal(size=(n, e))
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def lsr_ce_oracle(pred, targets, kappa, rule):
    """Direct summation over every token of every scored position."""
    n = ls.included_positions(np.asarray(targets))
    mass = kappa if rule == "paper-literal" else 1.0 - kappa
    e = pred.shape[1]
    total = 0.0
    for l in range(n):
        t = targets[l]
        total += kappa * -math.log(max(pred[l, t], 1e-12))
        for tok in range(e):
            if tok != t:
                total += (mass / (e - 1)) * -math.log(max(pred[l, tok], 1e-12))
    return total / n


class TestLsrCe:
    def test_kappa_one_standard_rule_is_plain_ce(self):
        gen = rng(1)
        pred = random_distributions(gen, 3, 4)
        targets = [3, 3, 2]  # content, content, EOS
        cfg = ls.LossConfig(kappa=1.0, smoothing_mass_rule="standard")
        got = ls.lsr_ce(Tensor(pred), targets, cfg).item()
        ce = -np.mean([math.log(pred[l, t]) for l, t in enumerate(targets)])
        assert got == pytest.approx(ce, abs=1e-12)

    @pytest.mark.parametrize("rule", ["paper-literal", "standard"])
    def test_exhaustive_oracle_e4(self, rule):
        gen = rng(2)
        for trial in range(20):
            pred = random_distributions(gen, 3, 4)
            targets = [int(gen.integers(3, 4)), int(gen.integers(3, 4)), 2]
            cfg = ls.LossConfig(kappa=0.95, smoothing_mass_rule=rule)
            got = ls.lsr_ce(Tensor(pred), targets, cfg).item()
            expect = lsr_ce_oracle(pred, targets, 0.95, rule)
            assert got == pytest.approx(expect, abs=1e-12)

    def test_uniform_prediction_single_position(self):
        pred = np.full((1, 4), 0.25)
        for rule in ("paper-literal", "standard"):
            cfg = ls.LossConfig(kappa=0.95, smoothing_mass_rule=rule)
            got = ls.lsr_ce(Tensor(pred), [3], cfg).item()
            assert got == pytest.approx(lsr_ce_oracle(pred, [3], 0.95, rule), abs=1e-12)

    def test_smoothing_raises_loss_on_peaked_correct_prediction(self):
        pred = np.full((1, 4), 0.01)
        pred[0, 3] = 0.97
        cfg = ls.LossConfig(kappa=0.95, smoothing_mass_rule="paper-literal")
        smoothed = ls.lsr_ce(Tensor(pred), [3], cfg).item()
        ce = ls.plain_ce(Tensor(pred), [3]).item()
        assert smoothed > ce

    def test_paper_literal_kappa_one_never_below_ce(self):
        gen = rng(3)
        cfg = ls.LossConfig(kappa=1.0, smoothing_mass_rule="paper-literal")
        for _ in range(25):
            pred = random_distributions(gen, 4, 6)
            targets = [5, 4, 3, 2]
            assert ls.lsr_ce(Tensor(pred), targets, cfg).item() >= \
                ls.plain_ce(Tensor(pred), targets).item() - 1e-12

    def test_positions_after_eos_masked(self):
        gen = rng(4)
        pred = random_distributions(gen, 5, 4)
        cfg = ls.LossConfig()
        targets_padded = [3, 2, ls.PAD_ID, ls.PAD_ID, ls.PAD_ID]
        got = ls.lsr_ce(Tensor(pred), targets_padded, cfg).item()
        expect = lsr_ce_oracle(pred[:2], [3, 2], 0.95, "paper-literal")
        assert got == pytest.approx(expect, abs=1e-12)

    def test_zero_probability_clamped_and_flagged(self):
        pred = np.full((1, 4), 1.0 / 3.0)
        pred[0, 1] = 0.0
        report = {}
        val = ls.lsr_ce(Tensor(pred), [3], ls.LossConfig(), report=report).item()
        assert math.isfinite(val)
        assert report["clamped"] == 1

    def test_gradient_matches_finite_differences(self):
        gen = rng(5)
        base = random_distributions(gen, 3, 5)
        cfg = ls.LossConfig()

        def f(x):
            return ls.lsr_ce(ad.reshape(x, (3, 5)), [4, 3, 2], cfg)

        report = ad.grad_check(f, Tensor(base.reshape(-1)), tol=1e-4)
        assert report.passed, str(report)


class TestDiscLoss:
    def test_perfect_discriminator(self):
        assert ls.disc_loss(Tensor(1.0), Tensor(0.0)).item() == 0.0

    def test_half_half(self):
        assert ls.disc_loss(Tensor(0.5), Tensor(0.5)).item() == pytest.approx(0.25, abs=0)

    def test_worst_case(self):
        assert ls.disc_loss(Tensor(0.0), Tensor(1.0)).item() == pytest.approx(1.0, abs=0)


class TestGenLoss:
    def test_perfect_generator(self):
        f = Tensor(rng(6).normal(size=(2, 3)))
        assert ls.gen_loss(f, Tensor(f.data.copy()), Tensor(1.0), ls.LossConfig()).item() == 0.0

    def test_plug_in_values(self):
        # mse 0.1 with xi=10 plus adversarial at 0.5
        f_real = Tensor(np.zeros((1, 10)))
        f_fake = Tensor(np.full((1, 10), math.sqrt(0.1)))
        got = ls.gen_loss(f_real, f_fake, Tensor(0.5), ls.LossConfig(xi=10.0)).item()
        assert got == pytest.approx(0.625, abs=1e-12)

    def test_xi_to_zero_limit_is_pure_adversarial(self):
        f_real = Tensor(np.zeros((1, 4)))
        f_fake = Tensor(np.ones((1, 4)))
        tiny = ls.gen_loss(f_real, f_fake, Tensor(0.25), ls.LossConfig(xi=1e-12)).item()
        assert tiny == pytest.approx(0.5 * 0.75 ** 2, abs=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ls.LossError, match="shape"):
            ls.gen_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))),
                        Tensor(0.5), ls.LossConfig())


class TestProbeNetLoss:
    def test_matching_with_unit_probe(self):
        i = Tensor(np.array([1.0, 2.0, 3.0]))
        assert ls.probe_net_loss(i, Tensor(i.data.copy()), Tensor(np.ones(3))).item() == 0.0

    def test_zero_compensated_independent_of_c(self):
        i = Tensor(np.array([1.0, 2.0]))
        zero = Tensor(np.zeros(2))
        a = ls.probe_net_loss(i, zero, Tensor(np.array([0.3, 0.9]))).item()
        b = ls.probe_net_loss(i, zero, Tensor(np.array([0.9, 0.1]))).item()
        assert a == b == pytest.approx(5.0, abs=0)

    def test_direct_evaluation(self):
        got = ls.probe_net_loss(Tensor([1.0, 2.0]), Tensor([1.0, 1.0]),
                                Tensor([1.0, 0.5])).item()
        assert got == pytest.approx(2.25, abs=0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ls.LossError, match="length"):
            ls.probe_net_loss(Tensor([1.0]), Tensor([1.0, 2.0]), Tensor([1.0, 1.0]))


class TestProbeCompLoss:
    def test_empty_probe_is_zero(self):
        pred = random_distributions(rng(7), 4, 5)
        assert ls.probe_comp_loss(Tensor(pred), [3, 4, 2, 0], np.zeros(4)).item() == 0.0

    def test_full_probe_equals_plain_ce_over_all_positions(self):
        gen = rng(8)
        pred = random_distributions(gen, 4, 5)
        targets = [3, 4, 2, 0]
        got = ls.probe_comp_loss(Tensor(pred), targets, np.ones(4)).item()
        expect = -sum(math.log(pred[l, t]) for l, t in enumerate(targets))
        assert got == pytest.approx(expect, abs=1e-12)

    def test_masked_ce_oracle(self):
        pred = random_distributions(rng(9), 2, 4)
        got = ls.probe_comp_loss(Tensor(pred), [3, 3], np.array([1, 0])).item()
        assert got == pytest.approx(-math.log(pred[0, 3]), abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.booleans(), min_size=1, max_size=8), st.integers(0, 10_000))
    def test_monotone_in_probe_support(self, bits, seed):
        gen = rng(seed)
        n = len(bits)
        pred = random_distributions(gen, n, 5)
        targets = gen.integers(0, 5, size=n)
        c = np.array(bits, dtype=float)
        base = ls.probe_comp_loss(Tensor(pred), targets, c).item()
        grown = c.copy()
        off = np.flatnonzero(grown == 0)
        if off.size:
            grown[off[0]] = 1.0
        assert ls.probe_comp_loss(Tensor(pred), targets, grown).item() >= base


@pytest.mark.parametrize("case", ["lsr_paper", "lsr_standard", "disc", "gen", "probe_net", "probe_comp"])
def test_losses_nonnegative_and_fd_checked(case):
    gen = rng(abs(hash(case)) % 2**32)
    if case.startswith("lsr"):
        rule = "paper-literal" if case.endswith("paper") else "standard"
        cfg = ls.LossConfig(smoothing_mass_rule=rule)
        def f(x):
            p = ad.softmax(ad.reshape(x, (3, 5)))
            return ls.lsr_ce(p, [4, 3, 2], cfg)
        point = Tensor(gen.normal(size=15))
    elif case == "disc":
        def f(x):
            s = ad.sigmoid(x)
            return ls.disc_loss(ad.reshape(ad.slice_axis(s, 0, 0, 1), ()),
                                ad.reshape(ad.slice_axis(s, 0, 1, 2), ()))
        point = Tensor(gen.normal(size=2))
    elif case == "gen":
        f_real = Tensor(gen.normal(size=(2, 3)))
        def f(x):
            parts = ad.reshape(ad.slice_axis(x, 0, 0, 6), (2, 3))
            dfake = ad.sigmoid(ad.reshape(ad.slice_axis(x, 0, 6, 7), ()))
            return ls.gen_loss(f_real, parts, dfake, ls.LossConfig())
        point = Tensor(gen.normal(size=7))
    elif case == "probe_net":
        i_clean = Tensor(np.abs(gen.normal(size=4)) + 0.5)
        i_comp = Tensor(np.abs(gen.normal(size=4)) + 0.5)
        def f(x):
            return ls.probe_net_loss(i_clean, i_comp, ad.sigmoid(x))
        point = Tensor(gen.normal(size=4))
    else:
        def f(x):
            p = ad.softmax(ad.reshape(x, (3, 5)))
            return ls.probe_comp_loss(p, [4, 2, 3], np.array([1, 0, 1]))
        point = Tensor(gen.normal(size=15))

    assert f(point).item() >= 0.0
    report = ad.grad_check(f, point, tol=1e-4)
    assert report.passed, f"{case}: {report}"
