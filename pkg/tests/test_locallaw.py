import math

import numpy as np
import pytest

from rmtlab import ensembles as ens
from rmtlab import locallaw as ll
from rmtlab import observables as obs
from rmtlab import resolvents as rv
from rmtlab.errors import ConfigError


class TestPredictions:
    def test_bulk_formula(self):
        assert ll.bulk_prediction(100, 1, [1.0], 0.5, 0.01) == pytest.approx(
            100 ** (-0.5) * math.sqrt(0.5 / 1.0)
        )

    def test_far_formula(self):
        assert ll.far_prediction(100, 1, [1.0], 12.0) == pytest.approx(
            100 ** (-0.5) / (10.0 * 144.0)
        )

    def test_k1_split(self):
        o = obs.traceless(np.eye(10))  # pure trace part
        v = ll.k1_split_prediction(o, 10, 1j)
        assert v == pytest.approx(1.0 / 10.0)


class TestSweepMachinery:
    def test_fast_path_matches_chain_engine(self):
        # the sweep's diagonal/bilinear evaluation equals the generic engine
        n = 30
        spec = ens.EnsembleSpec(n=n, seed=3)
        rng = ens.stream_rng(0, n, 0)
        eig = rv.eigendecompose(ens.sample_wigner(spec, rng=rng))
        a = obs.alpha_mesoscopic(n, 0.7, seed=1234)
        z = 0.2 + 0.3j
        w = 1.0 / (eig.lambdas - z)
        at = eig.rotate(a.matrix)
        fast1 = complex(np.sum(np.diagonal(at) * w)) / n
        ref1 = rv.chain_average(eig, rv.ChainDescriptor([rv.ChainLink(z)], [a]))
        assert fast1 == pytest.approx(ref1, rel=1e-12)
        fast2 = complex(w @ ((at * at.T) @ w)) / n
        ref2 = rv.chain_average(
            eig, rv.ChainDescriptor([rv.ChainLink(z), rv.ChainLink(z)], [a, a])
        )
        assert fast2 == pytest.approx(ref2, rel=1e-11)

    def test_records_deterministic_and_ordered(self):
        cfg = ll.SweepConfig(ns=(40,), etas=(0.5, 0.2), ks=(1,), alphas=(1.0,),
                             samples_per_cell=3)
        a = ll.run_error_sweep(cfg, seed=5)
        b = ll.run_error_sweep(cfg, seed=5)
        assert [(r.cell, r.seed, r.statistic) for r in a] == [
            (r.cell, r.seed, r.statistic) for r in b
        ]
        assert [(r.cell, r.seed) for r in a] == sorted((r.cell, r.seed) for r in a)

    def test_regime_precondition_skips(self):
        # eta so small that N eta rho < N^epsilon
        cfg = ll.SweepConfig(ns=(50,), etas=(1e-6,), samples_per_cell=1)
        recs = ll.run_error_sweep(cfg, seed=1)
        assert all(r.skipped for r in recs)
        cfg_far = ll.SweepConfig(ns=(50,), etas=(0.5,), regime="far", samples_per_cell=1)
        recs = ll.run_error_sweep(cfg_far, seed=1)
        assert all(r.skipped for r in recs)

    def test_identity_reduces_to_trace_error(self):
        cfg = ll.SweepConfig(ns=(60,), etas=(0.7,), alphas=("identity",),
                             samples_per_cell=2)
        recs = ll.run_error_sweep(cfg, seed=2)
        for r in recs:
            assert not r.skipped
            assert r.prediction == pytest.approx(1.0 / (60 * 0.7))
            assert r.psi == pytest.approx(60 * 0.7 * r.statistic, rel=1e-12)


class TestFits:
    def _synthetic(self, errs_by_eta, n=100, k=1):
        recs = []
        for i, (eta, vals) in enumerate(sorted(errs_by_eta.items())):
            for s, v in enumerate(vals):
                recs.append(ll.ErrorRecord(cell=i, n=n, k=k, alpha=1.0, energy=0.0,
                                           eta=eta, regime="bulk", mode="averaged",
                                           seed=s, statistic=v, prediction=1.0,
                                           ratio=v))
        return recs

    def test_exact_power_law(self):
        etas = [0.1, 0.2, 0.4, 0.8]
        recs = self._synthetic({e: [2.0 * e**-0.5] for e in etas})
        slope, err = ll.fit_scaling_exponent(recs, "eta")
        assert slope == pytest.approx(-0.5, abs=1e-12)
        assert err <= 1e-12

    def test_one_over_n_eta(self):
        etas = [0.1, 0.2, 0.4, 0.8]
        recs = self._synthetic({e: [1.0 / (100 * e)] for e in etas})
        slope, _ = ll.fit_scaling_exponent(recs, "eta")
        assert slope == pytest.approx(-1.0, abs=1e-12)

    def test_needs_four_values(self):
        recs = self._synthetic({0.1: [1.0], 0.2: [0.5]})
        with pytest.raises(ValueError):
            ll.fit_scaling_exponent(recs, "eta")

    def test_normalized_n_fit(self):
        recs = []
        for i, n in enumerate((100, 200, 400, 800)):
            recs.append(ll.ErrorRecord(cell=i, n=n, k=1, alpha=1.0, energy=0.0,
                                       eta=12.0, regime="far", mode="averaged",
                                       seed=0, statistic=n ** (-0.5 - 0.5) * 3.0,
                                       prediction=1.0, ratio=1.0))
        slope, _ = ll.fit_scaling_exponent(recs, "n", normalized=True)
        assert slope == pytest.approx(-0.5, abs=1e-12)


class TestRankUniformity:
    def test_exact_ratios(self):
        recs = []
        for i, alpha in enumerate((0.0, 0.5, 1.0)):
            for s in range(3):
                recs.append(ll.ErrorRecord(cell=i, n=100, k=1, alpha=alpha,
                                           energy=0.0, eta=0.1, regime="bulk",
                                           mode="averaged", seed=s, statistic=1.0,
                                           prediction=1.0, ratio=1.0))
        rep = ll.rank_uniformity_report(recs)
        assert rep["score"] == pytest.approx(1.0)

    def test_needs_three_alphas(self):
        recs = []
        for i, alpha in enumerate((0.0, 1.0)):
            recs.append(ll.ErrorRecord(cell=i, n=100, k=1, alpha=alpha, energy=0.0,
                                       eta=0.1, regime="bulk", mode="averaged",
                                       seed=0, statistic=1.0, prediction=1.0,
                                       ratio=1.0))
        with pytest.raises(ValueError):
            ll.rank_uniformity_report(recs)

    def test_normalization_gap_between_conventions(self):
        # the HS-normalized prediction differs from an operator-norm one by
        # exactly N^{(1-alpha)/2} for an alpha observable
        n, alpha = 400, 0.5
        o = obs.alpha_mesoscopic(n, alpha, seed=9)
        hs_pred = math.sqrt(o.hs2)
        op_pred = o.opnorm
        assert op_pred / hs_pred == pytest.approx(n ** ((1.0 - o.alpha) / 2.0), rel=1e-10)


@pytest.mark.slow
class TestSmallScaleScaling:
    def test_eta_slope_traceless(self):
        n = 500
        etas = tuple(np.geomspace(n**-0.8, n**-0.2, 5))
        cfg = ll.SweepConfig(ns=(n,), etas=etas, alphas=(1.0,), samples_per_cell=40)
        recs = ll.run_error_sweep(cfg, seed=11)
        slope, err = ll.fit_scaling_exponent(recs, "eta")
        assert abs(slope + 0.5) <= 0.15

    def test_isotropic_cells_run(self):
        cfg = ll.SweepConfig(ns=(80,), etas=(0.3,), ks=(1,), alphas=(1.0,),
                             samples_per_cell=4, mode="isotropic")
        recs = ll.run_error_sweep(cfg, seed=13)
        live = [r for r in recs if not r.skipped]
        assert live and all(np.isfinite(r.ratio) for r in live)

    def test_far_regime_ratio(self):
        cfg = ll.SweepConfig(ns=(300,), etas=(12.0,), alphas=(1.0,),
                             samples_per_cell=40, regime="far")
        recs = ll.run_error_sweep(cfg, seed=17)
        med = np.median([r.ratio for r in recs])
        assert 1.0 / 3.0 <= med <= 3.0
