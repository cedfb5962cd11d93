"""Fisher information: closed forms, FD oracle, MC consistency, jitter."""
import numpy as np
import pytest

from oed import autodiff as ad
from oed.exceptions import NotPositiveDefiniteError
from oed.fim import (
    expected_fim,
    fim_from_moments,
    jitter_ladder,
    joint_moments,
    observed_fim,
)
from oed.kalman import run_filter
from oed.models import (
    ModelAtTheta,
    affine_model,
    build_model,
    builtin_msd,
)
from oed.simulate import RngSpec, simulate_truth


def _gain_model():
    # y_1 = theta * u_1 + noise, total noise variance q + r
    return affine_model(
        "gain",
        1,
        1,
        1,
        1,
        {
            "F": [[0.0]],
            "B": [[{"coeffs": [1.0]}]],
            "H": [[1.0]],
            "Q": [[0.4]],
            "R": [[0.6]],
            "m0": [0.0],
            "P0": [[0.0]],
        },
    )


def _noise_model():
    # y_1 = noise with variance theta
    return affine_model(
        "noise",
        1,
        1,
        1,
        1,
        {
            "F": [[0.0]],
            "B": [[0.0]],
            "H": [[1.0]],
            "Q": [[0.0]],
            "R": [[{"coeffs": [1.0]}]],
            "m0": [0.0],
            "P0": [[0.0]],
        },
    )


def test_mean_gain_closed_form():
    # I = u^2 / (q + r) = 4 at u=2, q+r=1
    info = expected_fim(_gain_model(), np.array([0.7]), np.array([[2.0]]))
    assert abs(info[0, 0] - 4.0) <= 1e-10


def test_noise_variance_closed_form():
    # I = 1 / (2 theta^2) = 0.5 at theta=1
    info = expected_fim(_noise_model(), np.array([1.0]), np.array([[0.0]]))
    assert abs(info[0, 0] - 0.5) <= 1e-10


def test_joint_moments_scalar_recursion():
    model = ModelAtTheta(
        F=np.array([[0.5]]),
        B=np.array([[1.0]]),
        H=np.array([[1.0]]),
        Q=np.array([[1.0]]),
        R=np.array([[0.1]]),
        m0=np.array([1.0]),
        P0=np.array([[0.0]]),
    )
    mom = joint_moments(model, np.array([[1.0], [0.0]]), model.m0, model.P0)
    assert np.allclose(mom.mean, [1.5, 0.75], rtol=1e-15)
    # Var(y1)=1.1, Var(y2)=0.5*1*0.5+1+0.1=1.35, Cov(y2,y1)=0.5*1=0.5
    assert np.allclose(mom.cov, [[1.1, 0.5], [0.5, 1.35]], rtol=1e-15)


def test_joint_moments_deterministic_accumulator():
    # F=I, H=I, Q=R=0, P0=0: cov is zero, mean telescopes the inputs
    n = 2
    model = ModelAtTheta(
        F=np.eye(n),
        B=np.array([[1.0], [2.0]]),
        H=np.eye(n),
        Q=np.zeros((n, n)),
        R=np.zeros((n, n)),
        m0=np.array([0.5, -0.5]),
        P0=np.zeros((n, n)),
    )
    us = np.array([[1.0], [2.0], [-1.0]])
    mom = joint_moments(model, us, model.m0, model.P0)
    assert np.array_equal(mom.cov, np.zeros((6, 6)))
    expect = []
    acc = model.m0.copy()
    for u in us:
        acc = acc + model.B[:, 0] * u[0]
        expect.extend(acc)
    assert np.allclose(mom.mean, expect, rtol=1e-15)


def test_cross_blocks_are_exact_transposes():
    model = build_model(builtin_msd(), np.array([1.0, 2.0]))
    mom = joint_moments(model, np.ones((4, 1)), np.zeros(2), np.asarray(model.P0))
    cov = np.asarray(mom.cov)
    assert np.array_equal(cov, cov.T)


def test_unconditioned_equals_explicit_prior_start():
    defn = builtin_msd()
    theta = np.array([1.2, 2.2])
    u = np.array([[1.0], [-0.5], [0.3]])
    a = expected_fim(defn, theta, u)
    model = build_model(defn, theta)
    b = expected_fim(defn, theta, u, start_mean=model.m0, start_cov=model.P0)
    assert np.array_equal(a, b)


def _fd_fim_oracle(defn, theta, u, h=1e-6):
    """Independent finite-difference assembly of the information matrix."""
    model = build_model(defn, theta)
    base = joint_moments(model, u, np.asarray(model.m0), np.asarray(model.P0))
    sigma = np.asarray(base.cov)
    p = theta.size
    dmu, dsig = [], []
    for i in range(p):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        mp = build_model(defn, tp)
        mm = build_model(defn, tm)
        momp = joint_moments(mp, u, np.asarray(mp.m0), np.asarray(mp.P0))
        momm = joint_moments(mm, u, np.asarray(mm.m0), np.asarray(mm.P0))
        dmu.append((momp.mean - momm.mean) / (2 * h))
        dsig.append((momp.cov - momm.cov) / (2 * h))
    si = np.linalg.inv(sigma)
    out = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            out[i, j] = dmu[i] @ si @ dmu[j] + 0.5 * np.trace(
                si @ dsig[i] @ si @ dsig[j]
            )
    return out


def test_expected_fim_matches_fd_oracle_msd():
    defn = builtin_msd()
    theta = np.array([1.3, 2.6])
    rng = np.random.default_rng(1)
    u = rng.uniform(-1, 1, size=(5, 1))
    info = expected_fim(defn, theta, u)
    oracle = _fd_fim_oracle(defn, theta, u)
    assert np.allclose(info, oracle, rtol=1e-4)


def _random_affine_defn(rng, p=2):
    n = int(rng.integers(1, 4))
    d = int(rng.integers(1, 3))
    m = int(rng.integers(1, 3))

    def entry(scale, coef_scale):
        return {
            "const": float(rng.normal() * scale),
            "coeffs": [float(rng.normal() * coef_scale) for _ in range(p)],
        }

    mats = {
        "F": [[entry(0.3, 0.1) for _ in range(n)] for _ in range(n)],
        "B": [[entry(0.5, 0.3) for _ in range(m)] for _ in range(n)],
        "H": [[entry(0.7, 0.3) for _ in range(n)] for _ in range(d)],
        "Q": (0.4 * np.eye(n)).tolist(),
        "R": (rng.uniform(0.3, 1.0) * np.eye(d)).tolist(),
        "m0": rng.normal(size=n).tolist(),
        "P0": (rng.uniform(0.1, 0.5) * np.eye(n)).tolist(),
    }
    return affine_model("rand", p, n, m, d, mats)


def test_expected_fim_symmetric_psd_on_random_cases():
    rng = np.random.default_rng(314)
    for _ in range(100):
        defn = _random_affine_defn(rng)
        theta = rng.normal(size=2) * 0.5
        length = int(rng.integers(1, 6))
        u = rng.uniform(-1, 1, size=(length, defn.n_inputs))
        info = expected_fim(defn, theta, u)
        assert np.array_equal(info, info.T)
        tr = np.trace(info)
        assert np.linalg.eigvalsh(info).min() >= -1e-8 * max(1.0, tr)


def test_observed_fim_data_free_for_linear_mean():
    # L'' is data independent when only B depends on theta:
    # J = u^2 / (q + r) for every measurement value
    defn = _gain_model()
    u = np.array([[2.0]])
    for y in (np.array([[0.3]]), np.array([[-4.0]])):
        model = build_model(defn, ad.seed_hyperdual(np.array([0.7])))
        _, loglik, _ = run_filter(model, u, y)
        j = observed_fim(loglik)
        assert np.allclose(j, 4.0, rtol=1e-12)


def test_mean_observed_fim_matches_expected_fim():
    # scalar model, T=5: average of -L'' over trajectories ~ expected info
    defn = affine_model(
        "meanfield",
        1,
        1,
        1,
        1,
        {
            "F": [[0.6]],
            "B": [[{"coeffs": [1.0]}]],
            "H": [[1.0]],
            "Q": [[0.3]],
            "R": [[0.4]],
            "m0": [0.2],
            "P0": [[0.5]],
        },
    )
    theta_true = np.array([1.1])
    rng = np.random.default_rng(77)
    us = rng.uniform(-1, 1, size=(5, 1))
    truth = build_model(defn, theta_true)
    traj = simulate_truth(truth, us, RngSpec(5150, 0), replicates=2000)
    ys = np.swapaxes(traj.ys, 0, 1)  # (T, 2000, 1)
    model = build_model(defn, ad.seed_hyperdual(theta_true))
    _, loglik, _ = run_filter(model, us, ys)
    j = observed_fim(loglik)
    assert j.shape == (2000, 1, 1)  # batch axis stays separate from dirs
    j_mean = j.mean(axis=0)
    info = expected_fim(defn, theta_true, us)
    assert np.abs(j_mean - info).max() <= 0.05 * np.abs(info).max()


def test_split_consistency_through_conditioning():
    # info(1..T) = info(1..k) + E[ conditioned info(k+1..T) ]
    defn = affine_model(
        "split",
        1,
        1,
        1,
        1,
        {
            "F": [[{"coeffs": [1.0]}]],
            "B": [[1.0]],
            "H": [[1.0]],
            "Q": [[0.2]],
            "R": [[0.3]],
            "m0": [0.5],
            "P0": [[0.4]],
        },
    )
    theta = np.array([0.7])
    k, t = 2, 5
    rng = np.random.default_rng(88)
    us = rng.uniform(-1, 1, size=(t, 1))
    total = expected_fim(defn, theta, us)
    prefix = expected_fim(defn, theta, us[:k])
    truth = build_model(defn, theta)
    traj = simulate_truth(truth, us[:k], RngSpec(31, 0), replicates=2000)
    ys = np.swapaxes(traj.ys, 0, 1)
    model = build_model(defn, ad.seed_hyperdual(theta))
    state, _, _ = run_filter(model, us[:k], ys)
    cond = expected_fim(
        defn,
        theta,
        us[k:],
        start_mean=ad.first_order(state.mean),
        start_cov=ad.first_order(state.cov),
    )
    assert cond.shape == (2000, 1, 1)
    approx = prefix + cond.mean(axis=0)
    assert np.abs(approx - total).max() <= 0.05 * np.abs(total).max()


def test_jitter_ladder_rules():
    # comfortably PD: no jitter
    assert jitter_ladder(3.0, 1.0) == 0.0
    # mildly negative eigenvalue: smallest sufficient level
    j = jitter_ladder(1.0, -5e-12)
    assert np.isclose(j, 1e-11)
    # beyond the ladder: nan
    assert np.isnan(jitter_ladder(1.0, -1.0))
    # vectorized
    out = jitter_ladder(np.array([3.0, 1.0]), np.array([1.0, -1.0]))
    assert out[0] == 0.0 and np.isnan(out[1])


def test_singular_batch_covariance_raises():
    model = ModelAtTheta(
        F=np.array([[0.5]]),
        B=np.array([[1.0]]),
        H=np.array([[1.0]]),
        Q=np.array([[0.0]]),
        R=np.array([[0.0]]),
        m0=np.array([0.0]),
        P0=np.array([[0.0]]),
    )
    mom = joint_moments(model, np.ones((2, 1)), model.m0, model.P0)
    mean = ad.Dual(mom.mean, np.zeros((1, 2)))
    cov = ad.Dual(mom.cov, np.zeros((1, 2, 2)))
    with pytest.raises(NotPositiveDefiniteError):
        fim_from_moments(mean, cov)


def test_tiny_noise_survives_via_jitter():
    defn = affine_model(
        "tiny",
        1,
        1,
        1,
        1,
        {
            "F": [[0.9]],
            "B": [[{"coeffs": [1.0]}]],
            "H": [[1.0]],
            "Q": [[0.0]],
            "R": [[1e-13]],
            "m0": [0.0],
            "P0": [[0.0]],
        },
    )
    info = expected_fim(defn, np.array([1.0]), np.ones((3, 1)))
    assert np.isfinite(info).all()
    assert info[0, 0] > 0
