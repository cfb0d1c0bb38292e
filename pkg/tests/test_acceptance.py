"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The desk-scale softmax
criteria use real MNIST IDX files when BRAVO_SIM_MNIST_DIR points at them
(train-images-idx3-ubyte / train-labels-idx1-ubyte / t10k-*), otherwise
they fall back to the bundled scikit-learn handwritten-digits set written
to IDX files, which preserves every asserted property at desk scale.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from bravo_sim.algorithms import LsvrgState, SagaState, StepSchedule, lsvrg_grad, saga_grad
from bravo_sim.attacks import AttackSpec
from bravo_sim.cli import final_window_mean, main, run_lowerbound
from bravo_sim.config import parse_config_text
from bravo_sim.core import StackedState, rng_stream
from bravo_sim.engine import SimulationState, run_experiment, write_trace
from bravo_sim.problems import LeastSquaresProblem, save_idx_dataset, synth_least_squares
from bravo_sim.theory import (
    TheoryParams,
    delta_bound,
    lyapunov,
    solve_reference,
    theory_step_bound,
)
from bravo_sim.topology import generate_erdos_renyi, metropolis_weights


def _report(num: int, name: str, ok: bool, elapsed: float | None = None) -> None:
    suffix = "" if elapsed is None else f" ({elapsed:.1f}s)"
    print(f"\nACCEPTANCE {num:>2} {name}: {'PASS' if ok else 'FAIL'}{suffix}")


# --------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def dataset_idx(tmp_path_factory):
    """IDX train/test files: real MNIST if provided, else bundled digits."""
    mnist_dir = os.environ.get("BRAVO_SIM_MNIST_DIR", "")
    if mnist_dir:
        d = Path(mnist_dir)
        candidates = {
            "train_images": ["train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"],
            "train_labels": ["train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz"],
            "test_images": ["t10k-images-idx3-ubyte", "t10k-images-idx3-ubyte.gz"],
            "test_labels": ["t10k-labels-idx1-ubyte", "t10k-labels-idx1-ubyte.gz"],
        }
        paths = {}
        for key, names in candidates.items():
            found = next((d / n for n in names if (d / n).exists()), None)
            if found is None:
                pytest.skip(f"BRAVO_SIM_MNIST_DIR set but {names[0]} missing")
            paths[key] = str(found)
        paths["source"] = "mnist"
        return paths

    from sklearn.datasets import load_digits

    digits = load_digits()
    images = np.round(digits.images / 16.0 * 255.0).astype(np.uint8)
    labels = digits.target.astype(np.int64)
    order = rng_stream(2024, purpose="acceptance-split").permutation(len(labels))
    test_idx, train_idx = order[:300], order[300:]
    root = tmp_path_factory.mktemp("idx")
    save_idx_dataset(images[train_idx], labels[train_idx], root / "train-im", root / "train-lb")
    save_idx_dataset(images[test_idx], labels[test_idx], root / "test-im", root / "test-lb")
    return {
        "train_images": str(root / "train-im"),
        "train_labels": str(root / "train-lb"),
        "test_images": str(root / "test-im"),
        "test_labels": str(root / "test-lb"),
        "source": "digits",
    }


FIG1_BASE = """
seed = 12
rounds = 20000
metrics_every = 100
topology.n = 4
topology.q = 1.0
byzantine.count = 1
attack.kind = gaussian
attack.std = 100.0
problem.kind = least_squares
problem.synth_samples = 10000
algorithm.name = {alg}
algorithm.lambda = 0.005
algorithm.batch_size = {batch}
step.kind = constant
step.alpha = 0.0008
"""


@pytest.fixture(scope="session")
def fig1_runs(tmp_path_factory):
    t0 = time.perf_counter()
    runs = {}
    for batch in (1, 10, 100):
        cfg = parse_config_text(FIG1_BASE.format(alg="drsa", batch=batch))
        runs[f"drsa-{batch}"] = run_experiment(cfg)
    runs["saga-1"] = run_experiment(parse_config_text(FIG1_BASE.format(alg="bravo-saga", batch=1)))
    elapsed = time.perf_counter() - t0
    out = tmp_path_factory.mktemp("fig1_traces")
    for name, res in runs.items():
        write_trace(out / f"{name}.csv", res.rows)
    return {"runs": runs, "elapsed": elapsed, "trace_dir": out}


@pytest.fixture(scope="session")
def bound_runs():
    """Criterion 4/5 data: 20-seed averages of V^k against the TV optimum."""
    import cvxpy as cp

    t0 = time.perf_counter()
    params = TheoryParams.least_squares(4)
    j, lam, rounds, every = 100, 0.005, 5000, 20
    alpha = theory_step_bound(params, j)
    net = generate_erdos_renyi(4, 1.0, rng_stream(0, purpose="topology"))
    edges = net.regular_edges()
    ks = np.arange(0, rounds + 1, every)
    all_v, all_conv = [], []
    for seed in range(20):
        problem = synth_least_squares(4, j, seed=seed)
        means = np.array([problem.targets[w].mean() for w in range(4)])
        # independent oracle for the TV-penalized optimum
        xv = cp.Variable(4)
        penalty = cp.sum(cp.abs(cp.vstack([xv[u] - xv[v] for u, v in edges])))
        objective = cp.sum(0.5 * cp.square(xv - means)) + lam * penalty
        cp.Problem(cp.Minimize(objective)).solve(solver=cp.CLARABEL)
        x_star_tv = StackedState(tuple(range(4)), np.asarray(xv.value).reshape(4, 1))
        x_tilde = solve_reference(problem, range(4))
        x_star_stack = StackedState(tuple(range(4)), np.tile(x_tilde, (4, 1)))
        state = SimulationState(
            net, problem, AttackSpec(), "bravo-saga", StepSchedule("constant", alpha),
            lam, 1, seed=seed, x_star=x_star_stack, init_value=2.0, track_lyapunov=True,
        )
        vs, convs = [], []
        for k in range(rounds + 1):
            if k % every == 0:
                vs.append(lyapunov(state.stacked(), x_star_tv, state.saga, alpha, 1.0, j))
                diff = state.regular_models() - x_star_stack.values
                convs.append(float(np.sum(diff * diff)))
            if k < rounds:
                state.run_round(k)
        all_v.append(vs)
        all_conv.append(convs)
    return {
        "ks": ks,
        "mean_v": np.mean(all_v, axis=0),
        "mean_conv": np.mean(all_conv, axis=0),
        "delta": delta_bound(params, alpha, lam, net, 1),
        "eta": params.eta,
        "alpha": alpha,
        "elapsed": time.perf_counter() - t0,
    }


SOFTMAX_BASE = """
seed = 5
rounds = 5000
metrics_every = 50
topology.n = 20
topology.q = 0.5
byzantine.count = {b}
attack.kind = {attack}
attack.std = 100.0
problem.kind = softmax
problem.images = {train_images}
problem.labels = {train_labels}
problem.test_images = {test_images}
problem.test_labels = {test_labels}
problem.partition = iid
problem.subsample = 2000
problem.classes = 10
algorithm.name = {alg}
algorithm.lambda = 0.005
algorithm.batch_size = 1
step.kind = constant
step.alpha = 0.01
reference.tol = 5e-3
reference.max_iters = 4000
"""


@pytest.fixture(scope="session")
def softmax_runs(dataset_idx):
    """Criterion 9/11 runs: gaussian-attacked and clean, plus a clean DRSA."""
    spec = [
        ("dpsgd-gauss", "dpsgd", 4, "gaussian"),
        ("saga-gauss", "bravo-saga", 4, "gaussian"),
        ("lsvrg-gauss", "bravo-lsvrg", 4, "gaussian"),
        ("saga-clean", "bravo-saga", 0, "none"),
        ("lsvrg-clean", "bravo-lsvrg", 0, "none"),
        ("drsa-clean", "drsa", 0, "none"),
    ]
    runs, elapsed = {}, {}
    for name, alg, b, attack in spec:
        t0 = time.perf_counter()
        cfg = parse_config_text(SOFTMAX_BASE.format(alg=alg, b=b, attack=attack, **{
            k: dataset_idx[k] for k in ("train_images", "train_labels", "test_images", "test_labels")
        }))
        runs[name] = run_experiment(cfg)
        elapsed[name] = time.perf_counter() - t0
    return {"runs": runs, "elapsed": elapsed, "source": dataset_idx["source"]}


NONIID_BASE = """
seed = 5
rounds = 5000
metrics_every = 50
topology.n = 20
topology.q = 0.5
byzantine.ids = 16,17,18,19
attack.kind = sample_duplicate
attack.target = 0
problem.kind = softmax
problem.images = {train_images}
problem.labels = {train_labels}
problem.test_images = {test_images}
problem.test_labels = {test_labels}
problem.partition = noniid
problem.classes = 10
algorithm.name = {alg}
algorithm.lambda = 0.02
algorithm.batch_size = 1
step.kind = constant
step.alpha = 0.01
reference.tol = 5e-3
reference.max_iters = 4000
"""


@pytest.fixture(scope="session")
def noniid_runs(dataset_idx):
    runs = {}
    for alg in ("bravo-saga", "bravo-lsvrg"):
        cfg = parse_config_text(NONIID_BASE.format(alg=alg, **{
            k: dataset_idx[k] for k in ("train_images", "train_labels", "test_images", "test_labels")
        }))
        runs[alg] = run_experiment(cfg)
    return runs


# --------------------------------------------------------------- criteria


def test_criterion_1_lowerbound_exactness():
    t0 = time.perf_counter()
    ok = True
    for algorithm in ("drsa", "bravo-saga", "bravo-lsvrg"):
        measured, analytic, all_zero = run_lowerbound(3, 2, 0.1, 5, algorithm, 1000)
        ok &= abs(measured - analytic) <= 1e-12 and all_zero
        assert abs(measured - analytic) <= 1e-12, (algorithm, measured, analytic)
        assert all_zero, f"{algorithm}: an iterate left exact zero"
        assert measured == pytest.approx(0.6, abs=1e-12)
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    _report(1, "lower-bound exactness", ok, elapsed)
    assert elapsed < 1.0


def test_criterion_2_conditional_unbiasedness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    j, p = 8, 3
    problem = LeastSquaresProblem({0: rng.standard_normal((j, p))})
    x = rng.standard_normal(p)
    full = problem.full_grad(0, x)

    saga = SagaState(problem, 0, rng.standard_normal(p))
    saga.table = rng.standard_normal((j, p))
    saga.table_sum = saga.table.sum(axis=0)
    table, table_sum = saga.table.copy(), saga.table_sum.copy()
    gs = []
    for i in range(j):
        saga.table[:] = table
        saga.table_sum[:] = table_sum
        gs.append(saga_grad(saga, problem, 0, np.array([i]), x))
    saga_err = float(np.max(np.abs(np.mean(gs, axis=0) - full)))

    class _NoRefresh:
        def random(self):
            return 1.0

    lsvrg = LsvrgState(problem, 0, rng.standard_normal(p))
    gs = [lsvrg_grad(lsvrg, problem, 0, np.array([i]), x, _NoRefresh()) for i in range(j)]
    lsvrg_err = float(np.max(np.abs(np.mean(gs, axis=0) - full)))

    elapsed = time.perf_counter() - t0
    ok = saga_err <= 1e-10 and lsvrg_err <= 1e-10 and elapsed < 1.0
    _report(2, "conditional unbiasedness oracle", ok, elapsed)
    assert saga_err <= 1e-10, saga_err
    assert lsvrg_err <= 1e-10, lsvrg_err
    assert elapsed < 1.0


def test_criterion_3_fig1_batch_plateaus(fig1_runs):
    runs, elapsed = fig1_runs["runs"], fig1_runs["elapsed"]
    plateau = {name: final_window_mean(res.rows, "conv_err") for name, res in runs.items()}
    ok = (
        plateau["drsa-10"] <= 0.8 * plateau["drsa-1"]
        and plateau["drsa-100"] <= 0.8 * plateau["drsa-10"]
        and plateau["saga-1"] <= plateau["drsa-100"]
        and elapsed < 60.0
    )
    _report(3, "batch-size plateau ordering", ok, elapsed)
    print(f"   plateaus: {{ {', '.join(f'{k}: {v:.3e}' for k, v in plateau.items())} }}")
    assert plateau["drsa-10"] <= 0.8 * plateau["drsa-1"], plateau
    assert plateau["drsa-100"] <= 0.8 * plateau["drsa-10"], plateau
    assert plateau["saga-1"] <= plateau["drsa-100"], plateau
    assert elapsed < 60.0


def test_criterion_4_theorem1_bound(bound_runs):
    ks = bound_runs["ks"]
    mean_v = bound_runs["mean_v"]
    eta, alpha, delta = bound_runs["eta"], bound_runs["alpha"], bound_runs["delta"]
    bound = (1 - eta * alpha) ** ks * mean_v[0] + 1.1 * delta
    worst = float(np.max(mean_v - bound))
    ok = bool(np.all(mean_v <= bound)) and bound_runs["elapsed"] < 30.0
    _report(4, "linear-convergence bound", ok, bound_runs["elapsed"])
    print(f"   max(mean V - bound) = {worst:.3e}, delta = {delta:.3e}")
    assert np.all(mean_v <= bound), f"bound violated by {worst}"
    assert bound_runs["elapsed"] < 30.0


def test_criterion_5_linear_convergence_shape(bound_runs):
    ks = bound_runs["ks"]
    conv = bound_runs["mean_conv"]
    plateau = float(np.mean(conv[int(len(conv) * 0.9):]))
    mask = conv >= 10 * plateau
    assert int(mask.sum()) >= 5, "pre-plateau segment too short to fit"
    slope = float(np.polyfit(ks[mask], np.log(conv[mask]), 1)[0])
    threshold = -0.5 * bound_runs["eta"] * bound_runs["alpha"]
    ok = slope <= threshold
    _report(5, "geometric decay slope", ok)
    print(f"   slope {slope:.3e} <= required {threshold:.3e} ({int(mask.sum())} points)")
    assert slope <= threshold


HAND_2AGENT = """
topology.edges = 0-1
problem.kind = least_squares
problem.samples.0 = -1,1
problem.samples.1 = 1,3
algorithm.name = bravo-saga
algorithm.lambda = 2.0
step.kind = constant
step.alpha = 0.01875
rounds = 2000
metrics_every = 100
"""


def test_criterion_6_lambda0_threshold(tmp_path, capsys):
    cfg_path = tmp_path / "hand.cfg"
    cfg_path.write_text(HAND_2AGENT, encoding="utf-8")
    assert main(["lambda0", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    lam0 = float(out.splitlines()[0].split("=")[1])
    assert abs(lam0 - 1.0) <= 1e-9, out

    cfg = parse_config_text(HAND_2AGENT)
    result = run_experiment(cfg)
    params = TheoryParams.least_squares(2)
    from bravo_sim.engine import build_network

    delta = delta_bound(params, 0.01875, 2.0, build_network(cfg), 1)
    tol = np.sqrt(delta) + 1e-3
    final = result.final.values[:, 0]
    ok = abs(lam0 - 1.0) <= 1e-9 and bool(np.all(np.abs(final - 1.0) <= tol))
    _report(6, "penalty threshold + consensus", ok)
    print(f"   lambda0 {lam0!r}, final models {final}, tolerance {tol:.3f}")
    assert np.all(np.abs(final - 1.0) <= tol), (final, tol)


def test_criterion_7_metropolis_doubly_stochastic():
    rng = np.random.default_rng(123)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(3, 51))
        q = float(rng.uniform(0.1, 0.9))
        net = generate_erdos_renyi(n, q, rng_stream(trial, purpose="topology"))
        w = metropolis_weights(net)
        assert np.array_equal(w, w.T)
        worst = max(
            worst,
            float(np.max(np.abs(w.sum(axis=1) - 1.0))),
            float(np.max(np.abs(w.sum(axis=0) - 1.0))),
        )
    ok = worst <= 1e-12
    _report(7, "metropolis doubly stochastic", ok)
    print(f"   worst row/col sum deviation {worst:.2e} over 100 graphs")
    assert worst <= 1e-12


DETERMINISM_CFG = """
seed = 3
rounds = 400
metrics_every = 20
topology.n = 6
topology.q = 0.7
byzantine.count = 1
attack.kind = gaussian
attack.std = 100.0
problem.kind = least_squares
problem.synth_samples = 200
algorithm.name = bravo-lsvrg
algorithm.lambda = 0.01
algorithm.batch_size = 2
step.kind = constant
step.alpha = 0.001
"""


def test_criterion_8_determinism(tmp_path):
    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(DETERMINISM_CFG, encoding="utf-8")
    traces = []
    for name, threads in (("a", "1"), ("b", "4"), ("c", "1")):
        out = tmp_path / name
        code = main(["run", "--config", str(cfg_path), "--out", str(out), "--threads", threads])
        assert code == 0
        traces.append((out / "trace.csv").read_bytes())
    ok = traces[0] == traces[1] == traces[2]
    _report(8, "byte-identical traces across threads and reruns", ok)
    assert traces[0] == traces[1], "threads 1 vs 4 differ"
    assert traces[0] == traces[2], "consecutive runs differ"


def test_criterion_9_attack_robustness(softmax_runs):
    runs, elapsed = softmax_runs["runs"], softmax_runs["elapsed"]
    c9_time = sum(elapsed[k] for k in ("dpsgd-gauss", "saga-gauss", "lsvrg-gauss", "saga-clean", "lsvrg-clean"))
    dpsgd = runs["dpsgd-gauss"]
    dpsgd_acc = final_window_mean(dpsgd.rows, "accuracy")
    dpsgd_failed = dpsgd.diverged or dpsgd_acc <= 0.2
    ratios = {}
    for alg in ("saga", "lsvrg"):
        attacked = final_window_mean(runs[f"{alg}-gauss"].rows, "accuracy")
        clean = final_window_mean(runs[f"{alg}-clean"].rows, "accuracy")
        ratios[alg] = attacked / clean
    ok = dpsgd_failed and all(r >= 0.85 for r in ratios.values()) and c9_time < 600.0
    _report(9, f"gaussian-attack robustness ({softmax_runs['source']})", ok, c9_time)
    print(f"   dpsgd accuracy {dpsgd_acc:.3f} (diverged={dpsgd.diverged}), ratios {ratios}")
    assert dpsgd_failed, f"dpsgd survived the attack: {dpsgd_acc}"
    for alg, ratio in ratios.items():
        assert ratio >= 0.85, (alg, ratio)
    assert c9_time < 600.0


def test_criterion_10_noniid_duplicating_ceiling(noniid_runs):
    accs = {alg: final_window_mean(res.rows, "accuracy") for alg, res in noniid_runs.items()}
    ok = all(0.65 <= a <= 0.82 for a in accs.values())
    _report(10, "non-iid sample-duplicating ceiling", ok)
    print(f"   final accuracies {accs} vs ceiling 0.8")
    for alg, acc in accs.items():
        assert 0.65 <= acc <= 0.82, (alg, acc)


def test_criterion_11_variance_reduction(softmax_runs):
    runs = softmax_runs["runs"]
    drsa_noise = final_window_mean(runs["drsa-clean"].rows, "grad_noise")
    ratios = {
        alg: final_window_mean(runs[f"{alg}-clean"].rows, "grad_noise") / drsa_noise
        for alg in ("saga", "lsvrg")
    }
    ok = all(r <= 0.5 for r in ratios.values())
    _report(11, "variance-reduction effect", ok)
    print(f"   grad-noise ratios vs drsa {ratios}")
    for alg, ratio in ratios.items():
        assert ratio <= 0.5, (alg, ratio)
