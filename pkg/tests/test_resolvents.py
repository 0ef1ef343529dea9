import math

import numpy as np
import pytest

from rmtlab import ensembles as ens
from rmtlab import observables as obs
from rmtlab import resolvents as rv
from rmtlab import semicircle as sc

PHI = (math.sqrt(5.0) - 1.0) / 2.0


def goe(n, seed):
    return ens.sample_wigner(ens.EnsembleSpec(n=n, beta=1, seed=seed))


def dense_chain_oracle(w, links, observables, x=None, y=None):
    """Slow reference path: dense inverses / |G| via eigh of the dense G,
    never touching the eigenbasis shortcut under test."""
    n = w.shape[0]
    mats = []
    for link in links:
        z = complex(link.z)
        g = np.linalg.inv(w - z * np.eye(n))
        if link.kind == "plain":
            mats.append(g)
        elif link.kind == "im":
            mats.append((g - g.conj().T) / 2j)
        else:  # |G| = (G G*)^{1/2} computed from the dense product
            ev, u = np.linalg.eigh(g @ g.conj().T)
            mats.append((u * np.sqrt(np.clip(ev, 0, None))) @ u.conj().T)
    prod = None
    k = len(links)
    for i, g in enumerate(mats):
        term = g
        if i < len(observables) and observables[i] is not None:
            a = observables[i]
            a = a.matrix if isinstance(a, obs.Observable) else a
            term = g @ a
        prod = term if prod is None else prod @ term
    if x is None:
        return np.trace(prod) / n
    return np.asarray(x).conj() @ prod @ np.asarray(y)


class TestEigendecompose:
    def test_permutation_case(self):
        w = ens.WignerSample(ens.EnsembleSpec(n=3, seed=0), np.diag([3.0, 1.0, 2.0]))
        eig = rv.eigendecompose(w)
        assert np.allclose(eig.lambdas, [1.0, 2.0, 3.0])
        assert np.allclose(np.abs(eig.vectors), np.eye(3)[:, [1, 2, 0]])

    def test_orthonormality_and_reconstruction(self):
        s = goe(120, 3)
        eig = rv.eigendecompose(s)
        u = eig.vectors
        assert np.max(np.abs(u.T @ u - np.eye(120))) <= 1e-10
        resid = np.max(np.abs(s.matrix - (u * eig.lambdas) @ u.T))
        assert resid <= 1e-9 * np.max(np.abs(s.matrix))
        assert np.all(np.diff(eig.lambdas) >= 0)

    def test_semicircle_histogram(self):
        s = goe(300, 4)
        eig = rv.eigendecompose(s)
        grid = np.sort(eig.lambdas)
        emp = (np.arange(1, 301)) / 300.0
        ks = np.max(np.abs(emp - sc.semicircle_cdf(grid)))
        assert ks <= 0.05


class TestChainsAgainstDenseOracle:
    def test_k1_identity_observable(self):
        w = np.diag([0.3, -1.2, 0.8])
        eig = rv.eigendecompose(ens.WignerSample(ens.EnsembleSpec(n=3, seed=0), w))
        chain = rv.ChainDescriptor([rv.ChainLink(1j)], [np.eye(3)])
        got = rv.chain_average(eig, chain)
        want = np.mean(1.0 / (np.array([0.3, -1.2, 0.8]) - 1j))
        assert got == pytest.approx(want, abs=1e-14)

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    def test_averaged_all_kinds(self, k):
        n = 40
        s = goe(n, 10 + k)
        eig = rv.eigendecompose(s)
        rng = np.random.default_rng(k)
        kinds = ["plain", "abs", "im", "plain"][:k]
        links = [
            rv.ChainLink(rng.uniform(-1.5, 1.5) + 1j * rng.uniform(0.2, 1.0), kind)
            for kind in kinds
        ]
        observables = []
        for _ in range(k):
            a = rng.standard_normal((n, n))
            observables.append(obs.traceless(a + a.T))
        chain = rv.ChainDescriptor(links, observables)
        got = rv.chain_average(eig, chain)
        want = dense_chain_oracle(s.matrix, links, observables)
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))

    def test_averaged_with_group(self):
        # <G1 G2 A>: None slot between the links
        n = 24
        s = goe(n, 17)
        eig = rv.eigendecompose(s)
        links = [rv.ChainLink(0.4 + 0.5j), rv.ChainLink(-0.2 + 0.3j)]
        a = obs.traceless(np.diag(np.arange(n, dtype=float)))
        chain = rv.ChainDescriptor(links, [None, a])
        got = rv.chain_average(eig, chain)
        want = dense_chain_oracle(s.matrix, links, [None, a])
        assert abs(got - want) <= 1e-10 * max(1.0, abs(want))

    def test_conjugation_symmetry(self):
        n = 30
        s = goe(n, 21)
        eig = rv.eigendecompose(s)
        rng = np.random.default_rng(5)
        a1 = obs.traceless(_sym(rng, n))
        a2 = obs.traceless(_sym(rng, n))
        z1, z2 = 0.7 + 0.4j, -0.3 + 0.9j
        fwd = rv.chain_average(eig, rv.ChainDescriptor([rv.ChainLink(z1), rv.ChainLink(z2)], [a1, a2]))
        # reversed observables, conjugated parameters: <G(z2*) A1 G(z1*) A2>
        rev = rv.chain_average(
            eig,
            rv.ChainDescriptor(
                [rv.ChainLink(np.conj(z2)), rv.ChainLink(np.conj(z1))], [a1, a2]
            ),
        )
        assert rev == pytest.approx(np.conj(fwd), abs=1e-12)

    @pytest.mark.parametrize("k", [0, 1, 2, 3])
    def test_isotropic_vs_oracle(self, k):
        n = 32
        s = goe(n, 30 + k)
        eig = rv.eigendecompose(s)
        rng = np.random.default_rng(40 + k)
        links = [
            rv.ChainLink(rng.uniform(-1, 1) + 1j * rng.uniform(0.3, 1.0))
            for _ in range(k + 1)
        ]
        observables = [obs.traceless(_sym(rng, n)) for _ in range(k)]
        x = rng.standard_normal(n)
        y = rng.standard_normal(n)
        chain = rv.ChainDescriptor(links, observables)
        got = rv.chain_isotropic(eig, chain, x, y)
        want = dense_chain_oracle(s.matrix, links, observables + [None], x=x, y=y)
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))

    def test_two_by_two_hand_value(self):
        w = np.array([[0.0, 1.0], [1.0, 0.0]])
        eig = rv.eigendecompose(ens.WignerSample(ens.EnsembleSpec(n=2, seed=0), w))
        e1 = np.array([1.0, 0.0])
        chain = rv.ChainDescriptor([rv.ChainLink(1j)], [])
        got = rv.chain_isotropic(eig, chain, e1, e1)
        # (1/2)(1/(1-i) + 1/(-1-i)) = i/2
        assert got == pytest.approx(0.5j, abs=1e-14)

    def test_completeness(self):
        n = 16
        s = goe(n, 51)
        eig = rv.eigendecompose(s)
        rng = np.random.default_rng(6)
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        assert np.vdot(eig.rotate_vector(x), eig.rotate_vector(y)) == pytest.approx(
            np.vdot(x, y), abs=1e-12
        )

    def test_isotropic_equals_averaged_with_rank_one(self):
        n = 20
        s = goe(n, 52)
        eig = rv.eigendecompose(s)
        rng = np.random.default_rng(7)
        a1 = obs.traceless(_sym(rng, n))
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        z1, z2 = 0.5 + 0.6j, -0.8 + 0.4j
        iso = rv.chain_isotropic(
            eig, rv.ChainDescriptor([rv.ChainLink(z1), rv.ChainLink(z2)], [a1]), x, y
        )
        closing = obs.rank_one_iso(x, y)
        avg = rv.chain_average(
            eig, rv.ChainDescriptor([rv.ChainLink(z1), rv.ChainLink(z2)], [a1, closing])
        )
        # <G1 A1 G2 (N y x* - <x,y>)> = <x, G1 A1 G2 y> - <x,y> <G1 A1 G2>
        bare = rv.chain_average(
            eig, rv.ChainDescriptor([rv.ChainLink(z1), rv.ChainLink(z2)], [a1, np.eye(n)])
        )
        assert avg * n == pytest.approx(n * (iso - np.vdot(x, y) * bare) / 1.0, rel=1e-10)
        assert iso == pytest.approx(avg + np.vdot(x, y) * bare, rel=1e-10)


def _sym(rng, n):
    a = rng.standard_normal((n, n))
    return a + a.T


class TestDeterministicValues:
    def test_k1_plain(self):
        a = obs.traceless(np.diag([2.0, 0.0, 0.0, 0.0]))
        chain = rv.ChainDescriptor([rv.ChainLink(1j)], [a])
        v = rv.deterministic_chain_value(chain)
        assert v == pytest.approx(sc.stieltjes(1j) * 0.5, rel=1e-9)

    def test_k2_product(self):
        rng = np.random.default_rng(8)
        n = 10
        a1 = obs.traceless(_sym(rng, n))
        a2 = obs.traceless(_sym(rng, n))
        z1, z2 = 1j, 0.4 + 0.7j
        chain = rv.ChainDescriptor([rv.ChainLink(z1), rv.ChainLink(z2)], [a1, a2])
        v = rv.deterministic_chain_value(chain)
        want = (
            sc.stieltjes(z1)
            * sc.stieltjes(z2)
            * np.trace(a1.matrix @ a2.matrix)
            / n
        )
        assert v == pytest.approx(want, rel=1e-9)

    def test_group_gives_divided_difference(self):
        n = 6
        a = obs.traceless(np.diag(np.arange(n, dtype=float)))
        z1, z2 = 1j, 2j
        chain = rv.ChainDescriptor([rv.ChainLink(z1), rv.ChainLink(z2)], [None, a])
        v = rv.deterministic_chain_value(chain)
        want = sc.divided_difference([z1, z2]) * np.trace(a.matrix) / n
        assert v == pytest.approx(want, rel=1e-8)


class TestPsiStatistic:
    def test_zero_when_exact(self):
        n = 12
        rng = np.random.default_rng(9)
        m = _sym(rng, n)
        a = obs.traceless(m - np.trace(m) / n * np.eye(n))
        s = goe(n, 60)
        eig = rv.eigendecompose(s)
        chain = rv.ChainDescriptor([rv.ChainLink(2j)], [a])
        psi = rv.psi_statistic(eig, chain)
        # psi is the normalized |chain - deterministic|; subtracting the
        # chain itself from both sides is the degenerate zero case
        got = rv.chain_average(eig, chain)
        det = rv.deterministic_chain_value(chain)
        eta, rho = chain.eta_rho()
        expect = n * math.sqrt(eta / rho) * abs(got - det) / math.sqrt(a.hs2)
        assert psi == pytest.approx(expect, rel=1e-12)
        assert rv.psi_statistic(eig, chain) >= 0.0

    def test_k0_arithmetic(self):
        # N eta |<G - m>| with values arranged to give exactly 1
        n = 100
        s = goe(n, 61)
        eig = rv.eigendecompose(s)
        z = 0.1 + 1.3j
        chain = rv.ChainDescriptor([rv.ChainLink(z)], [np.eye(n)])
        psi = rv.psi_statistic(eig, chain)
        gavg = np.mean(1.0 / (eig.lambdas - z))
        assert psi == pytest.approx(n * 1.3 * abs(gavg - sc.stieltjes(z)), rel=1e-12)

    def test_rejects_non_traceless(self):
        n = 10
        s = goe(n, 62)
        eig = rv.eigendecompose(s)
        bad = obs.traceless(np.diag(np.arange(1.0, n + 1)))  # nonzero trace
        chain = rv.ChainDescriptor([rv.ChainLink(1j), rv.ChainLink(2j)], [bad, bad])
        with pytest.raises(ValueError):
            rv.psi_statistic(eig, chain)

    def test_single_sample_order_one(self):
        n = 2000
        s = goe(n, 63)
        eig = rv.eigendecompose(s)
        a = obs.alpha_mesoscopic(n, 1.0, seed=1)
        eta = n**-0.5
        chain = rv.ChainDescriptor([rv.ChainLink(1j * eta)], [a])
        psi = rv.psi_statistic(eig, chain)
        assert psi <= n**0.15


class TestExactIdentities:
    def test_underline_residual_small(self):
        for seed, z in ((0, 1j), (1, 0.5 + 0.2j), (2, -1.0 + 0.05j)):
            s = goe(50, 70 + seed)
            g = np.linalg.inv(s.matrix - z * np.eye(50))
            resid = rv.underline_identity_residual(s, z)
            gnorm = np.linalg.norm(g, 2)
            assert resid <= 1e-12 * gnorm**2

    def test_underline_n2_hand_case(self):
        w = ens.WignerSample(
            ens.EnsembleSpec(n=2, seed=0), np.array([[0.3, -0.2], [-0.2, 0.1]])
        )
        assert rv.underline_identity_residual(w, 0.7j) <= 1e-14

    def test_correction_term_size(self):
        s = goe(80, 73)
        z = 1j
        g = np.linalg.inv(s.matrix - z * np.eye(80))
        m = sc.stieltjes(z)
        resid = rv.underline_identity_residual(s, z, include_g2_correction=False)
        expect = abs(m) * np.max(np.abs(g @ g)) / 80
        assert resid == pytest.approx(expect, rel=1e-9)

    def test_ward_identity(self):
        for seed, z in ((0, 1j), (1, 2.0 + 0.01j), (2, -0.5 - 0.3j)):
            s = goe(60, 80 + seed)
            eig = rv.eigendecompose(s)
            g = np.linalg.inv(s.matrix - complex(z) * np.eye(60))
            assert rv.ward_residual(eig, z) <= 1e-12 * np.linalg.norm(g, 2) ** 2

    def test_ward_scalar_case(self):
        eig = rv.EigenSystem(lambdas=np.array([0.7]), vectors=np.array([[1.0]]))
        assert rv.ward_residual(eig, 0.3 + 0.4j) <= 1e-15


class TestHermitianSymmetry:
    def test_im_chain_real_output(self):
        n = 25
        s = goe(n, 90)
        eig = rv.eigendecompose(s)
        rng = np.random.default_rng(11)
        a = obs.traceless(_sym(rng, n))
        chain = rv.ChainDescriptor(
            [rv.ChainLink(0.3 + 0.6j, "im"), rv.ChainLink(0.3 + 0.6j, "im")], [a, a]
        )
        v = rv.chain_average(eig, chain)
        assert abs(v.imag) <= 1e-12 * max(1.0, abs(v))


class TestChainValidation:
    def test_eta_zero_plain_link(self):
        with pytest.raises(ValueError):
            rv.ChainLink(1.5, "plain")

    def test_abs_link_real_z_allowed(self):
        rv.ChainLink(3.0, "abs")

    def test_observable_count(self):
        with pytest.raises(ValueError):
            rv.ChainDescriptor([rv.ChainLink(1j)], [None, None])
