import math

import numpy as np
import pytest
from scipy import stats

from rmtlab import dbm
from rmtlab import ensembles as ens
from rmtlab import observables as obs
from rmtlab import semicircle as sc
from rmtlab.resolvents import eigendecompose


def goe(n, seed):
    return ens.sample_wigner(ens.EnsembleSpec(n=n, beta=1, seed=seed))


class TestMatrixMethod:
    def test_zero_time(self):
        w = goe(10, 0)
        traj = dbm.simulate_trajectory(w, 0.0, 5, seed=1)
        eig = eigendecompose(w)
        assert traj.times.size == 1
        assert np.allclose(traj.lambdas[0], eig.lambdas)

    def test_orthonormal_frames_and_sorted_lambdas(self):
        traj = dbm.simulate_trajectory(goe(30, 1), 0.1, 10, seed=2)
        for k in range(traj.times.size):
            u = traj.vectors[k]
            assert np.max(np.abs(u.T @ u - np.eye(30))) <= 1e-8
            assert np.all(np.diff(traj.lambdas[k]) >= 0)

    def test_frame_continuity_signs(self):
        traj = dbm.simulate_trajectory(goe(30, 3), 0.05, 20, seed=4)
        for k in range(1, traj.times.size):
            d = np.diagonal(traj.vectors[k - 1].T @ traj.vectors[k])
            assert np.all(d > 0)

    def test_trace_is_brownian(self):
        # Tr W_t - Tr W_0 ~ N(0, 2t) under the real-class diagonal convention
        n, t = 100, 0.5
        vals = []
        for s in range(60):
            traj = dbm.simulate_trajectory(goe(n, 200 + s), t, 4, seed=s, keep_vectors=False, check_weyl=False)
            vals.append(traj.lambdas[-1].sum() - traj.lambdas[0].sum())
        vals = np.asarray(vals)
        assert abs(vals.mean()) <= 4.0 * math.sqrt(2 * t / len(vals))
        v = vals.var()
        se = 2 * t * math.sqrt(2.0 / len(vals))
        assert abs(v - 2 * t) <= 4.0 * se

    def test_weyl_check_runs(self):
        dbm.simulate_trajectory(goe(20, 5), 0.02, 4, seed=6, check_weyl=True)

    def test_determinism(self):
        a = dbm.simulate_trajectory(goe(15, 7), 0.05, 5, seed=8)
        b = dbm.simulate_trajectory(goe(15, 7), 0.05, 5, seed=8)
        assert np.array_equal(a.lambdas, b.lambdas)
        assert np.array_equal(a.vectors, b.vectors)


class TestSdeMethod:
    def test_orthonormality_preserved(self):
        traj = dbm.simulate_trajectory(goe(25, 9), 0.02, 5, method="sde-integrate", seed=10)
        for k in range(traj.times.size):
            u = traj.vectors[k]
            assert np.max(np.abs(u.T @ u - np.eye(25))) <= 1e-10

    def test_ordering_preserved(self):
        traj = dbm.simulate_trajectory(goe(25, 11), 0.02, 5, method="sde-integrate", seed=12)
        assert np.all(np.diff(traj.lambdas, axis=1) > 0)

    @pytest.mark.slow
    def test_methods_agree_in_distribution(self):
        # pooled terminal spectra from the two integrators, KS <= 0.05
        n, t, runs = 50, 0.05, 200
        pooled = {m: [] for m in ("matrix-diagonalize", "sde-integrate")}
        for method in pooled:
            for s in range(runs):
                w = goe(n, 1000 + s)
                traj = dbm.simulate_trajectory(
                    w, t, 2, method=method, seed=31_000 + s, keep_vectors=False, check_weyl=False
                )
                pooled[method].append(traj.lambdas[-1])
        a = np.concatenate(pooled["matrix-diagonalize"])
        b = np.concatenate(pooled["sde-integrate"])
        ks = stats.ks_2samp(a, b).statistic
        assert ks <= 0.05


class TestRigidity:
    def test_deterministic_quantile_path(self):
        n = 50
        base = sc.quantiles(n)
        times = np.linspace(0.0, 0.1, 4)
        lambdas = np.stack([base * math.sqrt(1 + t) for t in times])
        traj = dbm.DbmTrajectory(times, lambdas, None, 0, "matrix-diagonalize")
        ok, worst = dbm.rigidity_check(traj, xi=0.3)
        assert ok and worst <= 1e-9

    def test_outlier_fails(self):
        n = 50
        base = sc.quantiles(n)
        lambdas = np.stack([base + np.eye(1, n, n - 1).ravel(), base * math.sqrt(1.1)])
        traj = dbm.DbmTrajectory(np.array([0.0, 0.1]), lambdas, None, 0, "matrix-diagonalize")
        ok, worst = dbm.rigidity_check(traj, xi=0.3)
        assert not ok
        assert worst == pytest.approx(n ** (2.0 / 3.0), rel=1e-9)

    def test_goe_passes_at_desk_scale_threshold(self):
        # the statistic carries an O(1) floor from the i/N quantile
        # convention (half a spacing of systematic bias), so desk-scale
        # N needs xi above the asymptotic 0+; 0.55 is comfortable here
        traj = dbm.simulate_trajectory(goe(100, 13), 0.1, 5, seed=14, keep_vectors=False, check_weyl=False)
        ok, worst = dbm.rigidity_check(traj, xi=0.55)
        assert ok, worst
        assert worst > 1.0


class TestConditionalEnsemble:
    def test_identical_seeds_identical_paths(self):
        w = goe(12, 15)
        traj = dbm.simulate_trajectory(w, 0.02, 3, seed=16)
        u0 = traj.vectors[0]
        a = dbm.conditional_vector_ensemble(traj, u0, replicas=1, seed=17)[0]
        b = dbm.conditional_vector_ensemble(traj, u0, replicas=1, seed=17)[0]
        assert np.array_equal(a, b)

    def test_orthonormality_all_replicas(self):
        w = goe(12, 18)
        traj = dbm.simulate_trajectory(w, 0.02, 3, seed=19)
        frames = dbm.conditional_vector_ensemble(traj, traj.vectors[0], replicas=4, seed=20)
        for f in frames:
            for k in range(f.shape[0]):
                assert np.max(np.abs(f[k].T @ f[k] - np.eye(12))) <= 1e-8

    @pytest.mark.slow
    def test_diagonal_overlap_drifts_to_trace_average(self):
        # conditional mean of <u_i, A u_i> equilibrates toward <A> = 0
        n, t = 20, 0.2
        w = ens.sample_wigner(ens.EnsembleSpec(n=n, beta=1, offdiag="rademacher", seed=21))
        traj = dbm.simulate_trajectory(w, t, 8, seed=22, keep_vectors=True)
        a = obs.alpha_mesoscopic(n, 1.0, seed=23)
        sites = np.arange(5, 15)
        p = dbm.conditional_overlap_paths(traj, traj.vectors[0], a, sites, replicas=1000, seed=24)
        diag0 = np.einsum("rij->r", np.abs(p[:, 0] * np.eye(sites.size))) / sites.size
        start = np.abs(np.mean(p[:, 0].diagonal(axis1=1, axis2=2)))
        end = np.abs(np.mean(p[:, -1].diagonal(axis1=1, axis2=2)))
        assert end <= start + 3.0 / math.sqrt(1000 * sites.size)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        traj = dbm.simulate_trajectory(goe(10, 25), 0.03, 4, seed=26)
        path = tmp_path / "traj.bin"
        dbm.save_trajectory(traj, path)
        back = dbm.load_trajectory(path)
        assert np.array_equal(back.times, traj.times)
        assert np.array_equal(back.lambdas, traj.lambdas)
        assert np.array_equal(back.vectors, traj.vectors)
        assert back.method == traj.method
        assert back.noise_seed == traj.noise_seed
        assert back.time0 == traj.time0

    def test_roundtrip_without_vectors(self, tmp_path):
        traj = dbm.simulate_trajectory(goe(10, 27), 0.03, 4, seed=28, keep_vectors=False)
        path = tmp_path / "traj2.bin"
        dbm.save_trajectory(traj, path)
        back = dbm.load_trajectory(path)
        assert back.vectors is None
        assert np.array_equal(back.lambdas, traj.lambdas)

    def test_magic_check(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTATRAJ" + b"\0" * 64)
        with pytest.raises(ValueError):
            dbm.load_trajectory(path)


class TestExchangeability:
    @pytest.mark.slow
    def test_orthogonal_conjugation_invariance(self):
        # summary statistics of the trajectory law are invariant under
        # conjugating W0 by a fixed orthogonal matrix
        n, t, runs = 30, 0.1, 120
        q = obs.haar_orthogonal(n, np.random.default_rng(99))
        a_stats, b_stats = [], []
        for s in range(runs):
            w = goe(n, 3000 + s)
            wc = ens.WignerSample(w.spec, q @ w.matrix @ q.T, w.time)
            ta = dbm.simulate_trajectory(w, t, 2, seed=41_000 + s, keep_vectors=False, check_weyl=False)
            tb = dbm.simulate_trajectory(wc, t, 2, seed=42_000 + s, keep_vectors=False, check_weyl=False)
            a_stats.append([ta.lambdas[-1][-1], np.median(ta.lambdas[-1])])
            b_stats.append([tb.lambdas[-1][-1], np.median(tb.lambdas[-1])])
        a_stats, b_stats = np.asarray(a_stats), np.asarray(b_stats)
        for j in range(2):
            ks = stats.ks_2samp(a_stats[:, j], b_stats[:, j]).statistic
            assert ks <= 1.36 * math.sqrt(2.0 / runs) * 1.6


@pytest.mark.slow
def test_windowed_step_rule_matches_global():
    # the tracked-site step rule is an accuracy/cost tradeoff; on one
    # frozen path its pooled overlap statistics agree with the strict
    # global gap rule within MC error
    from rmtlab.resolvents import eigendecompose

    n, t = 80, 0.1
    spec = ens.EnsembleSpec(n=n, beta=1, offdiag="rademacher", diag="rademacher", seed=3)
    a = obs.alpha_mesoscopic(n, 1.0, seed=5)
    sites = np.unique(np.round(np.linspace(8, 71, 6)).astype(int))
    w0 = ens.sample_wigner(spec, rng=ens.stream_rng(11, 0))
    traj = dbm.simulate_trajectory(w0, t, 20, seed=100, keep_vectors=False, check_weyl=False)
    u0 = eigendecompose(w0).vectors
    res = {}
    for step_sites, margin, label in ((None, 16, "global"), ("tracked", 2, "windowed")):
        p = dbm.conditional_overlap_paths(traj, u0, a, sites, replicas=40, seed=777,
                                          gap_margin=margin, step_sites=step_sites)
        pd = np.einsum("rtii->rti", p)[:, -1, :]
        v = (n * pd**2 / (2 * a.hs2)).ravel()
        res[label] = (v.mean(), v.std(ddof=1) / math.sqrt(v.size))
    diff = abs(res["global"][0] - res["windowed"][0])
    err = math.hypot(res["global"][1], res["windowed"][1])
    assert diff <= 3.5 * err
