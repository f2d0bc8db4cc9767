import math
import warnings

import numpy as np
import pytest

from capserrin import eigen
from capserrin.eigen import EigenConvergenceWarning, lambda1, mu1, rayleigh_lambda, rayleigh_mu
from capserrin.fem import SolverError, assemble
from capserrin.geometry import CapSpec, make_cap_domain
from capserrin.mesh import TriMesh, refine, triangulate

from conftest import domain, solved


def _cosine(a, b, M):
    return float(a @ M @ b) / math.sqrt(float(a @ M @ a) * float(b @ M @ b))


@pytest.fixture(scope="module")
def half_disk_family():
    m = triangulate(domain("half_disk"), 0.02)
    meshes = [m, refine(m)]
    return [assemble(x) for x in meshes]


def test_half_disk_limits(half_disk_family):
    lams = [lambda1(s) for s in half_disk_family]
    mus = [mu1(s) for s in half_disk_family]
    assert -1e-6 <= lams[0].value <= 0.05
    assert abs(mus[0].value - 1.0) <= 0.02
    assert lams[1].value < lams[0].value
    assert mus[1].value - 1.0 < mus[0].value - 1.0
    for r in lams + mus:
        assert r.converged and r.residual <= 1e-8


def test_half_disk_eigenfields_are_x2(half_disk_family):
    sys = half_disk_family[0]
    x2 = sys.mesh.vertices[:, 1]
    assert _cosine(lambda1(sys).eigenfield.values, x2, sys.M) >= 0.999
    assert _cosine(mu1(sys).eigenfield.values, x2, sys.M) >= 0.999


def test_cap_margins_stable_under_refinement():
    lam, mu = [], []
    for h in (0.04, 0.02):
        sys = solved("cap", h).system
        lam.append(lambda1(sys).value)
        mu.append(mu1(sys).value)
    assert min(lam) > 0.1
    assert min(mu) > 1.05
    assert abs(lam[1] - lam[0]) <= 0.05 * lam[1]
    assert abs(mu[1] - mu[0]) <= 0.05 * (mu[1] - 1.0)


def test_rayleigh_bounds():
    sys = solved("cap_tilted", 0.04).system
    lam, mu = lambda1(sys).value, mu1(sys).value
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = np.zeros(sys.mesh.n_vertices)
        v[sys.free] = rng.normal(size=len(sys.free))
        assert rayleigh_lambda(sys, v) >= lam - 1e-10
        assert rayleigh_mu(sys, v) >= mu - 1e-8


def test_eigenfield_sign_and_normalization():
    sys = solved("cap", 0.04).system
    r = lambda1(sys)
    w = r.eigenfield.values
    assert w @ sys.M @ np.ones_like(w) > 0
    assert w @ sys.M @ w == pytest.approx(1.0, rel=1e-10)
    assert rayleigh_lambda(sys, w) == pytest.approx(r.value, rel=1e-10)


def test_nested_caps_monotone():
    lam, mu = [], []
    for c in (0.1, 0.15, 0.2, 0.25, 0.3):
        sys = assemble(triangulate(make_cap_domain(CapSpec(math.pi / 2, c), 0.005), 0.02))
        lam.append(lambda1(sys).value)
        mu.append(mu1(sys).value)
    assert all(b < a for a, b in zip(lam, lam[1:]))
    assert all(b < a for a, b in zip(mu, mu[1:]))
    assert lam[-1] >= 0 and mu[-1] >= 1


def test_steklov_field_energy_identity():
    sys = solved("cap", 0.04).system
    r = mu1(sys)
    w = r.eigenfield.values
    lhs = sys.energy(w)
    rhs = (r.value - 1.0) * float(w @ sys.M_T @ w)
    assert lhs == pytest.approx(rhs, rel=1e-8)


@pytest.mark.parametrize("name", ["cap", "cap_tilted", "cap_small", "perturbed", "perturbed5", "chord", "half_disk"])
def test_lower_limits_on_suite_domains(name):
    sys = solved(name, 0.04).system
    assert lambda1(sys).value >= -1e-6
    assert mu1(sys).value >= 1.0 - 1e-6


def test_non_convergence_warns(monkeypatch):
    sys = solved("cap", 0.08).system
    monkeypatch.setattr(eigen._inverse_iteration, "__defaults__", (1,))
    with pytest.warns(EigenConvergenceWarning):
        r = lambda1(sys)
    assert not r.converged and r.iterations == 1
    with pytest.warns(EigenConvergenceWarning):
        assert not mu1(sys).converged


def test_requires_sigma():
    v = np.array([[0.0, 0.2], [1.0, 0.2], [0.0, 1.0]])
    m = TriMesh(v, np.array([[0, 1, 2]]), np.zeros(3, dtype=int), np.zeros((0, 2), dtype=int),
                np.zeros(0, dtype=int))
    sys = assemble(m)
    with pytest.raises(SolverError):
        lambda1(sys)
    with pytest.raises(SolverError):
        mu1(sys)


def test_converged_runs_do_not_warn():
    sys = solved("cap", 0.08).system
    with warnings.catch_warnings():
        warnings.simplefilter("error", EigenConvergenceWarning)
        lambda1(sys)
        mu1(sys)
