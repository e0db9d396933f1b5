"""Bloch stability: eigenvalue iteration against dense oracles.

The oracle assembles the full Hermitian matrix of the shifted-gradient
quadratic form in the plane-wave basis e^{i xi.x} e_c, where the form is
diagonal in xi up to the moduli field, and diagonalizes it with eigh.
It shares no code with the iterative path (no package transforms, no
symbol helpers).
"""

import numpy as np
import pytest

from micromech import Grid, MacroBC, MooneyRivlin, SolverParams, solve
from micromech.errors import ParameterError
from micromech.grid import modified_symbols
from micromech.stability import (
    BlochResult,
    bloch_min_eigen,
    bloch_symbols,
    first_unstable,
    mode_to_perturbation,
    stability_sweep,
    tangent_field,
)


# =========================================================================
# dense oracle
# =========================================================================

def dense_bloch_beta(n, length, dim, Lfield, k):
    """Smallest eigenvalue of the Bloch operator by dense diagonalization.

    Lfield is (npts, d, d, d, d). Basis functions are the npts plane
    waves per component; the rigid translation (zero symbol) is dropped.
    """
    d = dim
    npts = n**dim
    ints = np.fft.fftfreq(n, 1.0 / n)
    mesh = np.meshgrid(*([ints] * dim), indexing="ij")
    m_all = np.stack(mesh, axis=-1).reshape(-1, dim)
    xi = np.pi * m_all / length
    omega = np.pi / (length * np.asarray(k, dtype=float))
    b = 1j * (xi + omega)
    bsq = np.sum(np.abs(b) ** 2, axis=1)
    # same admissible set as the analyzer: no translation, no component
    # beyond three quarters of the band edge
    band = np.all(np.abs(m_all) <= 0.75 * (n / 2) + 1e-9, axis=1)
    keep = (bsq > 1e-12 * bsq.max()) & band
    xi_l, b_l = xi[keep], b[keep]
    nfreq = xi_l.shape[0]

    ax = -length + (2.0 * length / n) * np.arange(n)
    xmesh = np.meshgrid(*([ax] * dim), indexing="ij")
    x = np.stack(xmesh, axis=-1).reshape(-1, dim)
    E = np.exp(1j * xi_l @ x.T)  # (nfreq, npts)

    H = np.zeros((nfreq * d, nfreq * d), dtype=complex)
    for f in range(nfreq):
        for g in range(nfreq):
            w = np.conj(E[f]) * E[g] / npts
            blk = np.einsum("p,pcjql,j,l->cq", w, Lfield,
                            np.conj(b_l[f]), b_l[g])
            H[f * d:(f + 1) * d, g * d:(g + 1) * d] = blk
    H = 0.5 * (H + H.conj().T)
    return float(np.linalg.eigvalsh(H).min())


def random_tangent_field(npts, dim, eig_lo, eig_hi, rng):
    """Major-symmetric moduli with pointwise eigenvalues in [lo, hi]."""
    m = dim * dim
    A = rng.standard_normal((npts, m, m))
    Q = np.linalg.qr(A)[0]
    eigs = rng.uniform(eig_lo, eig_hi, size=(npts, m))
    M = np.einsum("pab,pb,pcb->pac", Q, eigs, Q)
    return M.reshape(npts, dim, dim, dim, dim)


def identity_tangent(npts, dim):
    eye = np.eye(dim * dim).reshape(dim, dim, dim, dim)
    return np.broadcast_to(eye, (npts, dim, dim, dim, dim)).copy()


# =========================================================================
# analytic and oracle agreement
# =========================================================================

def min_shifted_sq(n, length, k):
    """Exhaustive lattice minimum of |omega + xi|^2 over live frequencies."""
    ints = np.fft.fftfreq(n, 1.0 / n)
    mesh = np.meshgrid(*([ints] * len(k)), indexing="ij")
    m_all = np.stack(mesh, axis=-1).reshape(-1, len(k))
    xi = np.pi * m_all / length
    omega = np.pi / (length * np.asarray(k, dtype=float))
    vals = np.sum((xi + omega) ** 2, axis=1)
    band = np.all(np.abs(m_all) <= 0.75 * (n / 2) + 1e-9, axis=1)
    return float(vals[(vals > 1e-12 * vals.max()) & band].min())


class TestHomogeneous:
    @pytest.mark.parametrize("k", [(2, 2), (3, 2), (4, 3), (1, 1)])
    def test_identity_moduli_beta_is_min_symbol(self, k):
        # unit moduli: beta = min over live shifted freqs of |omega+xi|^2;
        # for all k_j >= 2 this is |omega|^2, for k_j = 1 an axis can
        # reach zero and only the cheapest nonzero axis is paid
        grid = Grid(2, 8, 0.5)
        Lf = identity_tangent(grid.npoints, 2)
        res = bloch_min_eigen(grid, Lf, k, mu_rep=1.0, seed=3)
        assert res.converged
        assert res.beta == pytest.approx(min_shifted_sq(8, 0.5, k), rel=1e-8)

    def test_all_k_at_least_two_gives_omega_sq(self):
        grid = Grid(2, 8, 0.5)
        Lf = identity_tangent(grid.npoints, 2)
        res = bloch_min_eigen(grid, Lf, (2, 3), mu_rep=1.0, seed=3)
        omega = np.pi / (grid.length * np.array([2.0, 3.0]))
        assert res.beta == pytest.approx(float(np.sum(omega**2)), rel=1e-8)

    def test_identity_moduli_3d(self):
        grid = Grid(3, 4, 0.5)
        Lf = identity_tangent(grid.npoints, 3)
        res = bloch_min_eigen(grid, Lf, (2, 1, 1), mu_rep=1.0, seed=0)
        assert res.converged
        assert res.beta == pytest.approx(
            min_shifted_sq(4, 0.5, (2, 1, 1)), rel=1e-8)

    def test_mode_is_unit_norm_eigenvector(self):
        grid = Grid(2, 8, 0.5)
        Lf = identity_tangent(grid.npoints, 2)
        res = bloch_min_eigen(grid, Lf, (2, 3), mu_rep=1.0, seed=1)
        norm = float(np.sum(np.abs(res.p) ** 2)) / grid.npoints
        assert norm == pytest.approx(1.0, rel=1e-10)


class TestDenseOracle:
    @pytest.mark.parametrize("seed", range(5))
    def test_positive_definite_fields(self, seed):
        rng = np.random.default_rng(100 + seed)
        grid = Grid(2, 6, 0.5)
        Lf = random_tangent_field(grid.npoints, 2, 0.5, 3.0, rng)
        k = [(2, 1), (1, 2), (2, 2), (3, 1), (2, 3)][seed]
        want = dense_bloch_beta(grid.n, grid.length, 2, Lf, k)
        got = bloch_min_eigen(grid, Lf, k, mu_rep=1.0, seed=seed)
        assert got.converged
        assert got.beta == pytest.approx(want, rel=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_unstable_fields_negative_beta(self, seed):
        # losing strong ellipticity along a random rank-one pair drives a
        # genuinely unstable branch; the indefinite pointwise blocks also
        # exercise the penalty floor rho > -lambda_min
        rng = np.random.default_rng(200 + seed)
        grid = Grid(2, 6, 0.5)
        a = rng.standard_normal(2)
        a /= np.linalg.norm(a)
        v = rng.standard_normal(2)
        v /= np.linalg.norm(v)
        x = grid.coords().reshape(-1, 2)
        envelope = 1.0 + 0.5 * np.cos(np.pi * x[:, 0] / grid.length)
        eye = np.eye(4).reshape(2, 2, 2, 2)
        neg = np.einsum("i,j,k,l->ijkl", a, v, a, v)
        Lf = (eye[None] - 2.5 * envelope[:, None, None, None, None]
              * neg[None])
        k = [(2, 1), (2, 2), (1, 1)][seed]
        want = dense_bloch_beta(grid.n, grid.length, 2, Lf, k)
        got = bloch_min_eigen(grid, Lf, k, mu_rep=1.0, seed=seed)
        assert got.converged
        assert want < 0.0
        assert got.beta == pytest.approx(want, rel=1e-6)

    def test_translation_excluded_at_unit_multiplicity(self):
        # with k = (1,1) the shifted symbol vanishes at xi = -omega; that
        # coefficient is a rigid translation and must carry no weight
        grid = Grid(2, 6, 0.5)
        Lf = identity_tangent(grid.npoints, 2)
        res = bloch_min_eigen(grid, Lf, (1, 1), mu_rep=1.0, seed=2)
        _, _, bsq, live = bloch_symbols(grid, (1, 1))
        at = np.unravel_index(np.argmin(bsq), bsq.shape)
        assert bsq[at] == pytest.approx(0.0, abs=1e-20)
        assert not live[at]
        phat = np.fft.fftn(res.p, axes=(0, 1))
        dead = np.abs(phat[~live])
        assert float(dead.max()) < 1e-10 * float(np.abs(phat).max())
        assert res.beta > 0.0

    def test_outer_band_excluded(self):
        # the admissible set stops at three quarters of the band edge on
        # every axis; inside that box every nonzero symbol is live
        grid = Grid(2, 8, 0.5)
        _, _, bsq, live = bloch_symbols(grid, (2, 1))
        xi = modified_symbols(grid).xi
        edge = np.pi / grid.h
        outside = np.any(np.abs(xi) > 0.75 * edge + 1e-9, axis=-1)
        assert not np.any(live & outside)
        inside = ~outside & (bsq > 1e-12 * bsq.max())
        assert np.array_equal(live, inside)

    def test_rho_override_validated(self):
        grid = Grid(2, 6, 0.5)
        rng = np.random.default_rng(7)
        Lf = random_tangent_field(grid.npoints, 2, -2.0, 2.0, rng)
        with pytest.raises(ParameterError):
            bloch_min_eigen(grid, Lf, (2, 1), mu_rep=1.0, rho=0.5)

    def test_deterministic_given_seed(self):
        grid = Grid(2, 6, 0.5)
        rng = np.random.default_rng(11)
        Lf = random_tangent_field(grid.npoints, 2, 0.5, 2.0, rng)
        a = bloch_min_eigen(grid, Lf, (2, 1), mu_rep=1.0, seed=5)
        b = bloch_min_eigen(grid, Lf, (2, 1), mu_rep=1.0, seed=5)
        assert a.beta == b.beta
        assert np.array_equal(a.p, b.p)


# =========================================================================
# converged-state pipeline
# =========================================================================

@pytest.fixture(scope="module")
def converged():
    grid = Grid(2, 6, 0.5)
    model = MooneyRivlin(mu=1.0, kappa=9.8, dim=2)
    bc = MacroBC.strain(0.97 * np.eye(2))
    params = SolverParams(r_p_tol=1e-9, r_d_tol=1e-9, max_outer=4000)
    state, converged = solve(grid, model, bc, params)
    assert converged
    return grid, model, state


class TestStatePipeline:
    def test_tangent_field_shape_and_symmetry(self, converged):
        grid, model, state = converged
        Lf = tangent_field(grid, model, state)
        assert Lf.shape == (grid.npoints, 2, 2, 2, 2)
        assert np.allclose(Lf, np.transpose(Lf, (0, 3, 4, 1, 2)))

    def test_asymmetric_tangent_rejected(self, converged):
        grid, model, state = converged

        class Broken(MooneyRivlin):
            def tangent(self, F, internal):
                L = super().tangent(F, internal)
                L[:, 0, 1, 0, 0] += 0.5
                return L

        bad = Broken(mu=1.0, kappa=9.8, dim=2)
        with pytest.raises(ParameterError):
            tangent_field(grid, bad, state)

    def test_mildly_compressed_state_is_stable(self, converged):
        grid, model, state = converged
        results = stability_sweep(grid, model, state, k_max=2, seed=0)
        assert len(results) == 4
        assert all(r.converged for r in results)
        assert first_unstable(results, model.mu_rep) is None
        Lf = tangent_field(grid, model, state)
        for r in results:
            want = dense_bloch_beta(grid.n, grid.length, 2, Lf, r.k)
            assert r.beta == pytest.approx(want, rel=1e-6)


# =========================================================================
# sweep bookkeeping and mode extraction
# =========================================================================

class TestSweepAndMode:
    def _fake(self, k, beta):
        return BlochResult(k=k, omega=np.zeros(len(k)), beta=beta,
                           p=np.zeros(1), iterations=1, converged=True)

    def test_first_unstable_picks_lowest_multiplicity(self):
        results = [self._fake((1, 1), 0.2), self._fake((3, 1), -0.5),
                   self._fake((2, 1), -0.1), self._fake((1, 2), -0.1)]
        hit = first_unstable(results, mu_rep=1.0)
        assert hit.k == (1, 2)

    def test_first_unstable_none_when_all_nonnegative(self):
        results = [self._fake((1, 1), 0.0), self._fake((2, 2), 1e-12)]
        assert first_unstable(results, mu_rep=1.0) is None

    def test_mode_perturbation_shape_amplitude_periodicity(self):
        grid = Grid(2, 8, 0.5)
        Lf = identity_tangent(grid.npoints, 2)
        res = bloch_min_eigen(grid, Lf, (2, 1), mu_rep=1.0, seed=0)
        v = mode_to_perturbation(grid, res, amplitude=1e-3)
        assert v.shape == (16, 8, 2)
        assert v.dtype == np.float64
        assert np.abs(v).max() == pytest.approx(1e-3 * 2.0 * grid.length)
        # carrier period equals the supercell: shifting by one cell flips
        # nothing visible only after the full k-fold tiling
        big = np.tile(v, (2, 2, 1))
        assert np.allclose(big[:16], big[16:], atol=1e-15)

    def test_isotropic_mode_matches_supercell_grid(self):
        grid = Grid(2, 6, 0.5)
        Lf = identity_tangent(grid.npoints, 2)
        res = bloch_min_eigen(grid, Lf, (2, 2), mu_rep=1.0, seed=0)
        v = mode_to_perturbation(grid, res, amplitude=2e-3)
        big = grid.supercell(2)
        assert v.shape == big.shape + (2,)
