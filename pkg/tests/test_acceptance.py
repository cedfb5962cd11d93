"""Acceptance checklist: one test per release criterion, A1 through A9.

Each test prints a single verdict line (visible with ``pytest -s`` or on
failure) and asserts the criterion at its stated tolerance and runtime
budget.  The heavy closed-loop studies (A5 to A8) share module-scoped
run collections so the whole file stays inside a desk-scale time budget.
"""
import time

import numpy as np
import pytest
from click.testing import CliRunner
from scipy.stats import multivariate_normal

from oed import autodiff as ad
from oed.cli import main as cli_main
from oed.config import preset, resolve
from oed.design import run_experiment
from oed.fim import expected_fim, joint_moments, observed_fim
from oed.kalman import run_filter
from oed.models import affine_model, build_model, builtin_msd
from oed.simulate import RngSpec, simulate_truth


def _verdict(tag, ok, detail=""):
    print(f"[{tag}] {'PASS' if ok else 'FAIL'}{' ' + detail if detail else ''}")
    assert ok, f"{tag} failed: {detail}"


def _run_collection(preset_name, mode, seeds, **overrides):
    fields = preset(preset_name)
    fields.update(overrides)
    logs = []
    for s in seeds:
        fields["seed"] = s
        cfg = resolve(fields)
        logs.append(run_experiment(cfg.model, cfg.problem(), cfg.truth, mode=mode))
    return logs


@pytest.fixture(scope="module")
def msd_runs():
    """20-replicate MSD studies: optimal, random, and one-step lookahead."""
    seeds = range(20)
    return {
        "optimal": _run_collection("msd", "optimal", seeds),
        "random": _run_collection("msd", "random", seeds),
        "e1": _run_collection("msd", "optimal", seeds, lookahead=1),
        "truth": np.array([1.0, 2.0]),
    }


@pytest.fixture(scope="module")
def tc_runs():
    """5-replicate two-compartment study at a desk-scale draw count."""
    seeds = range(5)
    over = dict(steps=200, draws=200)
    return {
        "optimal": _run_collection("two-compartment", "optimal", seeds, **over),
        "random": _run_collection("two-compartment", "random", seeds, **over),
        "truth": np.array([0.2, 0.2, 0.2]),
    }


# -- A1: filter log-likelihood against the batch Gaussian density ----------


def _random_system(rng, n, d):
    a = rng.normal(size=(n, n))
    rho = np.abs(np.linalg.eigvals(a)).max()
    f = a * (rng.uniform(0.3, 0.95) / max(rho, 1e-12))
    b = rng.normal(size=(n, 1))
    h = rng.normal(size=(d, n))
    sq = rng.normal(size=(n, n))
    q = sq @ sq.T * 0.3 + 1e-3 * np.eye(n)
    sr = rng.normal(size=(d, d))
    r = sr @ sr.T * 0.3 + 0.1 * np.eye(d)
    sp = rng.normal(size=(n, n))
    p0 = sp @ sp.T * 0.5 + 1e-2 * np.eye(n)
    from oed.models import ModelAtTheta

    return ModelAtTheta(
        F=f, B=b, H=h, Q=q, R=r, m0=rng.normal(size=n), P0=p0
    )


def test_a1_filter_matches_batch_density():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for case in range(50):
        n = int(rng.integers(1, 4))
        d = int(rng.integers(1, 3))
        t = int(rng.integers(1, 21))
        model = _random_system(rng, n, d)
        us = rng.uniform(-1, 1, size=(t, 1))
        ys = simulate_truth(model, us, rng).ys
        _, loglik, _ = run_filter(model, us, ys)
        mom = joint_moments(model, us, model.m0, model.P0)
        batch = multivariate_normal(
            mean=mom.mean, cov=mom.cov, allow_singular=False
        ).logpdf(np.concatenate([y.ravel() for y in ys]))
        worst = max(worst, abs(loglik - batch) / max(1.0, abs(batch)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 10.0
    _verdict(
        "A1 filter vs batch density",
        ok,
        f"worst rel dev {worst:.2e}, {elapsed:.1f}s",
    )


# -- A2: derivative transport against finite differences -------------------


def test_a2_gradient_and_hessian_match_finite_differences():
    t0 = time.perf_counter()
    defn = builtin_msd()
    theta = np.array([1.0, 2.0])
    rng = np.random.default_rng(7)
    us = rng.uniform(-1, 1, size=(10, 1))
    ys = simulate_truth(build_model(defn, theta), us, RngSpec(7, 0)).ys

    def loglik(th):
        _, ll, _ = run_filter(build_model(defn, th), us, ys)
        return float(ll)

    ll = run_filter(build_model(defn, ad.seed_hyperdual(theta)), us, ys)[1]
    grad = ad.grad_vector(ll)
    hess = ad.hess_matrix(ll)

    h = 1e-6
    fd_grad = np.array(
        [
            (loglik(theta + h * e) - loglik(theta - h * e)) / (2 * h)
            for e in np.eye(2)
        ]
    )
    h2 = 1e-4
    fd_hess = np.zeros((2, 2))
    base = loglik(theta)
    for i in range(2):
        ei = np.eye(2)[i]
        fd_hess[i, i] = (
            loglik(theta + h2 * ei) - 2 * base + loglik(theta - h2 * ei)
        ) / h2**2
        for j in range(i + 1, 2):
            ej = np.eye(2)[j]
            fd_hess[i, j] = fd_hess[j, i] = (
                loglik(theta + h2 * (ei + ej))
                - loglik(theta + h2 * (ei - ej))
                - loglik(theta - h2 * (ei - ej))
                + loglik(theta - h2 * (ei + ej))
            ) / (4 * h2**2)

    rel_g = np.abs(grad - fd_grad).max() / max(np.abs(fd_grad).max(), 1e-12)
    rel_h = np.abs(hess - fd_hess).max() / max(np.abs(fd_hess).max(), 1e-12)
    elapsed = time.perf_counter() - t0
    ok = rel_g <= 1e-4 and rel_h <= 1e-2 and elapsed < 10.0
    _verdict(
        "A2 derivatives vs finite differences",
        ok,
        f"grad rel {rel_g:.2e}, hess rel {rel_h:.2e}, {elapsed:.1f}s",
    )


# -- A3: information matrix identities --------------------------------------


def _random_affine(rng, p=2, n=2):
    def entry(scale, coef):
        return {
            "const": float(rng.normal() * scale),
            "coeffs": (rng.normal(size=p) * coef).tolist(),
        }

    a = rng.normal(size=(n, n))
    rho = np.abs(np.linalg.eigvals(a)).max()
    f_base = a * (0.8 / max(rho, 1e-12))
    return affine_model(
        "case",
        p,
        n,
        1,
        1,
        {
            "F": [
                [
                    {"const": float(f_base[i, j]), "coeffs": (rng.normal(size=p) * 0.05).tolist()}
                    for j in range(n)
                ]
                for i in range(n)
            ],
            "B": [[entry(0.5, 0.3)] for _ in range(n)],
            "H": [[entry(1.0, 0.2) for _ in range(n)]],
            "Q": (0.2 * np.eye(n)).tolist(),
            "R": [[0.4]],
            "m0": [entry(0.3, 0.2) for _ in range(n)],
            "P0": (float(rng.uniform(0.1, 0.5)) * np.eye(n)).tolist(),
        },
    )


def test_a3_information_matrix_identities():
    rng = np.random.default_rng(11)
    worst_sym, worst_eig = 0.0, 0.0
    for case in range(100):
        defn = _random_affine(rng)
        theta = rng.normal(size=2) * 0.5
        t = int(rng.integers(1, 7))
        us = rng.uniform(-1, 1, size=(t, 1))
        info = expected_fim(defn, theta, us)
        scale = max(1.0, np.abs(info).max())
        worst_sym = max(worst_sym, np.abs(info - info.T).max() / scale)
        worst_eig = max(worst_eig, -np.linalg.eigvalsh(info)[0] / scale)

    gain = affine_model(
        "gain", 1, 1, 1, 1,
        {"F": [[0.0]], "B": [[{"coeffs": [1.0]}]], "H": [[1.0]], "Q": [[0.4]],
         "R": [[0.6]], "m0": [0.0], "P0": [[0.0]]},
    )
    noise = affine_model(
        "noise", 1, 1, 1, 1,
        {"F": [[0.0]], "B": [[0.0]], "H": [[1.0]], "Q": [[0.0]],
         "R": [[{"coeffs": [1.0]}]], "m0": [0.0], "P0": [[0.0]]},
    )
    # mean through a known gain: I = u^2/(q+r) = 4; scale of a pure
    # noise variance: I = 1/(2 theta^2) = 0.5
    dev_gain = abs(expected_fim(gain, np.array([0.7]), np.array([[2.0]]))[0, 0] - 4.0)
    dev_noise = abs(expected_fim(noise, np.array([1.0]), np.array([[0.0]]))[0, 0] - 0.5)
    ok = (
        worst_sym <= 1e-10
        and worst_eig <= 1e-8
        and dev_gain <= 1e-10
        and dev_noise <= 1e-10
    )
    _verdict(
        "A3 information identities",
        ok,
        f"sym {worst_sym:.1e}, min eig {worst_eig:.1e}, "
        f"closed forms {dev_gain:.1e}/{dev_noise:.1e}",
    )


# -- A4: mean observed information approaches the expected one -------------


def test_a4_mean_observed_information_matches_expected():
    t0 = time.perf_counter()
    # theta drives the dynamics, so the observed information genuinely
    # varies with the data and the average is a nontrivial estimate
    defn = affine_model(
        "ar-gain", 1, 1, 1, 1,
        {"F": [[{"coeffs": [1.0]}]], "B": [[1.0]], "H": [[1.0]], "Q": [[0.3]],
         "R": [[0.4]], "m0": [0.2], "P0": [[0.5]]},
    )
    theta = np.array([0.7])
    rng = np.random.default_rng(77)
    us = rng.uniform(-1, 1, size=(5, 1))
    traj = simulate_truth(build_model(defn, theta), us, RngSpec(5150, 0),
                          replicates=2000)
    ys = np.swapaxes(traj.ys, 0, 1)  # (T, 2000, 1)
    model = build_model(defn, ad.seed_hyperdual(theta))
    _, loglik, _ = run_filter(model, us, ys)
    j_mean = observed_fim(loglik).mean(axis=0)
    info = expected_fim(defn, theta, us)
    rel = np.abs(j_mean - info).max() / np.abs(info).max()
    elapsed = time.perf_counter() - t0
    ok = rel <= 0.05 and elapsed < 60.0
    _verdict(
        "A4 observed vs expected information",
        ok,
        f"rel dev {rel:.3f} over 2000 trajectories, {elapsed:.1f}s",
    )


# -- A5 to A7: mass-spring-damper design studies ----------------------------


def test_a5_optimal_design_beats_random(msd_runs):
    truth = msd_runs["truth"]
    term_o = np.array([log.mles[-1] for log in msd_runs["optimal"]])
    term_r = np.array([log.mles[-1] for log in msd_runs["random"]])
    mae_o = np.abs(term_o - truth).mean(axis=0)
    mae_r = np.abs(term_r - truth).mean(axis=0)
    pairings = int(
        (
            np.linalg.norm(term_o - truth, axis=1)
            < np.linalg.norm(term_r - truth, axis=1)
        ).sum()
    )
    mean_traj = np.mean([log.mles for log in msd_runs["optimal"]], axis=0)
    settled = np.abs(mean_traj[69:] - truth).max()
    ok = (
        np.all(mae_o < mae_r)
        and pairings >= 14
        and settled <= 0.3
    )
    _verdict(
        "A5 optimal vs random estimation error",
        ok,
        f"MAE {mae_o.round(3)} vs {mae_r.round(3)}, "
        f"pairings {pairings}/20, mean dev after step 70 {settled:.3f}",
    )


def test_a6_optimal_forces_are_bang_bang(msd_runs):
    us = np.concatenate([log.us.ravel() for log in msd_runs["optimal"]])
    frac = np.mean((np.abs(us - 1.0) <= 1e-3) | (np.abs(us + 1.0) <= 1e-3))
    ok = frac >= 0.80
    _verdict(
        "A6 bang-bang structure", ok, f"{frac:.1%} of forces at a bound"
    )


def test_a7_short_lookahead_is_no_better(msd_runs):
    truth = msd_runs["truth"]
    err = {
        key: np.median(
            [np.linalg.norm(log.mles[-1] - truth) for log in msd_runs[key]]
        )
        for key in ("e1", "optimal")
    }
    ok = err["e1"] >= err["optimal"]
    _verdict(
        "A7 lookahead ablation",
        ok,
        f"median terminal error {err['e1']:.3f} (1-step) vs "
        f"{err['optimal']:.3f} (3-step)",
    )


# -- A8: two-compartment study ----------------------------------------------


def test_a8_compartment_rates_recovered_only_by_design(tc_runs):
    hits = {}
    for mode in ("optimal", "random"):
        hits[mode] = [
            int(np.sum(np.abs(log.mles[-1] - 0.2) <= 0.05) >= 2)
            for log in tc_runs[mode]
        ]
    optimal_majority = sum(hits["optimal"]) >= 3
    random_minority = sum(hits["random"]) <= 2
    # the second clause demands that undesigned inputs leave the rates
    # unresolved; when random dosing happens to identify them too, this
    # check reports the missing contrast as a failure
    ok = optimal_majority and random_minority
    _verdict(
        "A8 two-compartment recovery contrast",
        ok,
        f"optimal {sum(hits['optimal'])}/5 within tolerance, "
        f"random {sum(hits['random'])}/5",
    )


# -- A9: determinism of the command-line runs -------------------------------


def test_a9_rerun_is_byte_identical(tmp_path):
    out = tmp_path / "r"
    args = [
        "run", "--preset", "msd", "--steps", "12", "--draws", "16",
        "--seed", "7", "--out", str(out),
    ]
    runner = CliRunner()
    assert runner.invoke(cli_main, args, catch_exceptions=False).exit_code == 0
    names = [
        "inputs.csv", "outputs.csv", "mle.csv", "weights.csv",
        "criterion.csv", "likelihood_final.csv",
    ]
    first = {name: (out / name).read_bytes() for name in names}
    assert runner.invoke(cli_main, args, catch_exceptions=False).exit_code == 0
    same = [name for name in names if (out / name).read_bytes() == first[name]]
    ok = len(same) == len(names)
    _verdict("A9 deterministic reruns", ok, f"{len(same)}/{len(names)} files identical")
