import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dirireg.errors import DimensionError, DomainError
from dirireg.links import logit
from dirireg.model import (
    CoefficientSet,
    CompositionDataset,
    LatentState,
    ModelConfig,
    apply_corrections,
    build_design,
    load_csv,
    log_penalized_posterior,
    log_penalized_posterior_grad,
    mean_surface,
    posterior_terms,
    precision_surface,
)


def _toy(seed=0, n=15, P=3, G=4, re=False):
    rng = np.random.default_rng(seed)
    Y = rng.dirichlet(np.full(P, 3.0), size=n)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    W = np.column_stack([np.ones(n), rng.uniform(-1, 1, size=n)])
    ds = CompositionDataset(Y, X, W, group=np.arange(n) % G if re else None)
    coeffs = CoefficientSet(
        rng.normal(scale=0.5, size=(2, P)) - 1.0, np.array([1.0, 0.3]),
        rng.normal(scale=0.3, size=(G, P)) if re else None, np.array([0.4, 0.7, 1.1])[:P] if re else None,
    )
    latent = LatentState(np.log(rng.gamma(2.0, size=(n, P))), 80.0, 6.0)
    return ds, coeffs, latent, ModelConfig(random_effects=re)


def test_mean_surface_examples():
    X = np.ones((4, 1))
    np.testing.assert_allclose(mean_surface(X, np.zeros((1, 3))), 0.5)
    beta = np.array([[logit(0.2), logit(0.3), logit(0.5)]])
    np.testing.assert_allclose(mean_surface(X, beta), np.tile([0.2, 0.3, 0.5], (4, 1)))
    mu = mean_surface(X, np.zeros((1, 3)))
    assert mu.sum(axis=1) == pytest.approx(1.5)
    assert (mu.sum(axis=1)[0] - 1.0) ** 2 == pytest.approx(0.25)


def test_precision_surface_examples():
    W = np.column_stack([np.ones(5), np.linspace(4.5, 7.5, 5)])
    assert np.all(precision_surface(W, [0.0, 0.0]) == 1.0)
    phi = precision_surface(W, [-1.0, 0.5])
    assert phi.min() == pytest.approx(math.exp(1.25))
    assert phi.max() == pytest.approx(math.exp(2.75))
    phi2 = precision_surface(W, [0.0, 0.5])
    np.testing.assert_allclose(phi2 / phi, math.e)
    with pytest.raises(DimensionError):
        precision_surface(W, [1.0])


def test_constraint_term_when_means_sum_to_one():
    n = 6
    ds = CompositionDataset(np.tile([0.2, 0.3, 0.5], (n, 1)), np.ones((n, 1)), np.ones((n, 1)))
    beta = np.array([[logit(0.2), logit(0.3), logit(0.5)]])
    latent = LatentState(np.zeros((n, 3)), 40.0, 5.0)
    terms = posterior_terms(ds, CoefficientSet(beta, [0.0]), latent, ModelConfig())
    assert terms["constraint"] == pytest.approx(n * 0.5 * math.log(40.0 / (2 * math.pi)), rel=1e-12)


@pytest.mark.parametrize("re", [False, True])
def test_gradient_matches_central_differences(re):
    ds, coeffs, latent, mconf = _toy(seed=3, re=re)
    g = log_penalized_posterior_grad(ds, coeffs, latent, mconf)
    blocks = ["beta", "beta_phi", "log_alpha"] + (["u"] if re else [])
    for name in blocks:
        holder = latent if name == "log_alpha" else coeffs
        attr = "log_alpha" if name == "log_alpha" else name
        base = getattr(holder, attr)
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            h = 1e-5 * max(1.0, abs(base[idx]))
            vals = []
            for sgn in (1, -1):
                arr = base.copy()
                arr[idx] += sgn * h
                setattr(holder, attr, arr)
                vals.append(log_penalized_posterior(ds, coeffs, latent, mconf))
            setattr(holder, attr, base)
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        np.testing.assert_allclose(g[name], fd, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(fd).max()))


def test_posterior_rejects_bad_shapes():
    ds, coeffs, latent, mconf = _toy()
    with pytest.raises(DimensionError):
        log_penalized_posterior(ds, CoefficientSet(np.zeros((3, 3)), [0.0, 0.0]), latent, mconf)
    with pytest.raises(DimensionError):
        log_penalized_posterior(ds, coeffs, latent, ModelConfig(random_effects=True))
    with pytest.raises(DomainError):
        LatentState(np.zeros((2, 2)), 0.0, 1.0)


def test_apply_corrections_examples():
    mu_adj, alpha_adj = apply_corrections(np.array([[0.3, 0.3, 0.6]]), np.array([2.0]))
    np.testing.assert_allclose(mu_adj, [[0.25, 0.25, 0.5]])
    np.testing.assert_allclose(alpha_adj, [[0.5, 0.5, 1.0]])
    row = np.array([[0.2, 0.3, 0.5]])
    np.testing.assert_array_equal(apply_corrections(row, np.array([1.0]))[0], row)


@settings(max_examples=100, deadline=None)
@given(
    arrays(float, (5, 4), elements=st.floats(1e-3, 1.0)),
    arrays(float, (5,), elements=st.floats(1e-2, 1e3)),
)
def test_apply_corrections_properties(mu, phi):
    mu_adj, alpha_adj = apply_corrections(mu, phi)
    np.testing.assert_allclose(mu_adj.sum(axis=1), 1.0, rtol=1e-14)
    np.testing.assert_allclose(alpha_adj.sum(axis=1), phi, rtol=1e-12)
    again, _ = apply_corrections(mu_adj, phi)
    np.testing.assert_allclose(again, mu_adj, rtol=1e-15)


def test_design_building_and_rank_check():
    X, names, coding = build_design({"f": ["a", "b", "a", "c"]}, factors=("f",))
    assert coding == "cell-means" and names == ["f[a]", "f[b]", "f[c]"]
    X, names, coding = build_design({"f": ["a", "b", "a", "c"], "x": [1, 2, 3, 4]}, factors=("f",))
    assert names == ["(Intercept)", "f[b]", "f[c]", "x"]
    Y = np.tile([0.5, 0.5], (4, 1))
    with pytest.raises(DimensionError, match="'dup'"):
        CompositionDataset(Y, np.column_stack([np.ones(4), np.ones(4)]), np.ones((4, 1)),
                           mean_names=("(Intercept)", "dup"))


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_csv_factor_numeric_and_group(tmp_path):
    p = _write(tmp_path, "y1,y2,y3,pos,x,player\n"
               "0.2,0.3,0.5,GK,1.5,p1\n0.1,0.6,0.3,GS,2.0,p2\n0.3,0.3,0.4,GK,0.5,p1\n0.25,0.25,0.5,GS,1.0,p3\n")
    ds = load_csv(p, mean_cols=["pos"], precision_cols=["x"], group="player")
    assert ds.mean_names == ("pos[GK]", "pos[GS]")
    assert ds.precision_names == ("(Intercept)", "x")
    assert ds.group.tolist() == [0, 1, 0, 2] and ds.group_levels == ("p1", "p2", "p3")
    ds0 = load_csv(p)
    assert ds0.Q == 1 and ds0.R == 1 and ds0.P == 3


def test_load_csv_errors(tmp_path):
    p = _write(tmp_path, "y1,y2,x\n0.5,0.5,1\n0.4,oops,2\n")
    with pytest.raises(ValueError, match="line 3"):
        load_csv(p, mean_cols=["x"])
    p = _write(tmp_path, "y1,y2,x\n0.5,0.5,1\n0.4,0.6,2\n")
    with pytest.raises(KeyError, match="'z'"):
        load_csv(p, mean_cols=["z"])
    with pytest.raises(KeyError, match="'w'"):
        load_csv(p, response=["y1", "w"])


def test_load_csv_renormalises_and_replaces_zeros(tmp_path):
    p = _write(tmp_path, "y1,y2,y3\n0.2,0.3,0.5\n0.0,0.5,0.5\n0.2,0.2,0.2\n")
    with pytest.warns(UserWarning):
        ds = load_csv(p)
    np.testing.assert_allclose(ds.Y.sum(axis=1), 1.0)
    assert ds.Y[1, 0] == pytest.approx(1e-6)
    np.testing.assert_allclose(ds.Y[2], 1 / 3)
