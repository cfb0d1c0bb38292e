"""Synchronous round-based simulation: broadcast, receive, sample, update.

Every round, each agent emits one message (regular agents their model,
Byzantine agents their attack output), then every regular agent draws a
sample index from its own per-round stream and updates. All updates read
the round-k snapshot only, so results are bit-identical regardless of
agent iteration order or thread count.
"""
from __future__ import annotations

import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np

from . import theory
from .algorithms import (
    LsvrgState,
    SagaState,
    StepSchedule,
    bravo_step,
    dpsgd_step,
    drsa_step,
    lsvrg_grad,
    saga_grad,
    step_size,
    tv_subgradient,
)
from .attacks import (
    AttackSpec,
    gaussian_attack,
    lowerbound_attack,
    sample_duplicate_attack,
    sign_flip_attack,
)
from .config import ExperimentConfig, config_to_lines
from .core import (
    ConfigError,
    DataError,
    DivergenceError,
    RoundStream,
    StackedState,
    rng_stream,
)
from .problems import (
    LeastSquaresProblem,
    load_idx_dataset,
    partition_iid,
    partition_noniid,
    subsample,
    synth_least_squares,
)
from .topology import (
    Network,
    assign_byzantine,
    generate_erdos_renyi,
    incidence_matrix,
    is_regular_subgraph_connected,
    metropolis_weights,
    min_nonzero_singular,
    network_from_edges,
)

_HUGE = float(np.finfo(np.float64).max)

TRACE_COLUMNS = ("k", "conv_err", "model_var", "accuracy", "grad_noise", "lyapunov", "wall_ms")


@dataclass(frozen=True)
class MetricsRow:
    k: int
    conv_err: float | None
    model_var: float
    accuracy: float | None = None
    grad_noise: float | None = None
    lyapunov: float | None = None
    wall_ms: float | None = None


@dataclass
class RunResult:
    rows: list
    header: dict
    final: StackedState
    diverged: bool


def model_variance(models: np.ndarray) -> float:
    """Mean over coordinates of the across-agent population variance."""
    if models.shape[0] < 1:
        raise ValueError("need at least one regular agent")
    return float(np.mean(np.var(models, axis=0)))


def accuracy_probe(
    model: np.ndarray, test_features: np.ndarray, test_labels: np.ndarray, n_classes: int
) -> float:
    """Top-1 accuracy; argmax ties break toward the lowest class index."""
    f = test_features.shape[1]
    logits = test_features @ model.reshape(n_classes, f).T
    preds = np.argmax(logits, axis=1)
    return float(np.mean(preds == test_labels))


def _sat(value: float) -> float:
    """Clamp a possibly non-finite metric to a huge finite sentinel."""
    v = float(value)
    if np.isfinite(v):
        return v
    return _HUGE if not v < 0 else -_HUGE


class SimulationState:
    """Mutable per-experiment state; one instance per run."""

    def __init__(
        self,
        net: Network,
        problem,
        attack: AttackSpec,
        algorithm: str,
        schedule: StepSchedule,
        lam: float,
        batch_size: int,
        seed: int,
        x_star: StackedState | None = None,
        init_value: float = 0.0,
        track_lyapunov: bool = False,
        theory_lip: float = 1.0,
        grad_noise_window: int = 100,
        threads: int = 1,
        probe_agent: int | None = None,
    ):
        attack.validate(net)
        self.net = net
        self.problem = problem
        self.attack = attack
        self.algorithm = algorithm
        self.schedule = schedule
        self.lam = lam
        self.batch_size = batch_size
        self.seed = seed
        self.x_star = x_star
        self.track_lyapunov = track_lyapunov
        self.theory_lip = theory_lip
        self.probe_agent = probe_agent

        n, p = net.n_agents, problem.p
        self.p = p
        self.regular_index = np.array(net.regular_ids, dtype=np.intp)
        self.nb_ids = {w: np.array(net.neighbors[w], dtype=np.intp) for w in range(n)}
        self.x = np.full((n, p), float(init_value))
        self.round = 0

        self.sample_streams = {w: RoundStream(seed, w, "sample") for w in net.regular_ids}
        self.attack_streams = {}
        self.shadow_streams = {}
        if attack.kind == "gaussian":
            self.attack_streams = {v: RoundStream(seed, v, "attack") for v in net.byzantine_ids}
        if attack.kind == "sign_flip":
            self.shadow_streams = {v: RoundStream(seed, v, "sample") for v in net.byzantine_ids}

        self.saga: dict[int, SagaState] = {}
        self.lsvrg: dict[int, LsvrgState] = {}
        if algorithm == "bravo-saga":
            self.saga = {
                w: SagaState(problem, w, self.x[w], track_models=track_lyapunov)
                for w in net.regular_ids
            }
        elif algorithm == "bravo-lsvrg":
            self.lsvrg = {w: LsvrgState(problem, w, self.x[w]) for w in net.regular_ids}
        if track_lyapunov and algorithm not in ("bravo-saga", "bravo-lsvrg"):
            raise ConfigError("lyapunov tracking requires bravo-saga or bravo-lsvrg")

        self.weights = None
        if algorithm == "dpsgd":
            w_matrix = metropolis_weights(net)
            if not np.allclose(w_matrix.sum(axis=1), 1.0, atol=1e-9):
                raise ConfigError("dpsgd mixing matrix is not row-stochastic")
            self.weights = w_matrix

        self.grad_windows = {
            w: deque(maxlen=grad_noise_window) for w in net.regular_ids
        }
        self._pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    # ------------------------------------------------------------ rounds

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _attack_message(self, v: int, k: int) -> np.ndarray:
        kind = self.attack.kind
        if kind == "gaussian":
            return gaussian_attack(self.p, self.attack_streams[v].at_round(k), self.attack.std)
        if kind == "sign_flip":
            return sign_flip_attack(self.x[v], self.attack.c)
        if kind == "sample_duplicate":
            return sample_duplicate_attack(self.x[self.attack.target])
        if kind == "lowerbound":
            return lowerbound_attack(self.p)
        raise ConfigError(f"attack kind '{kind}' cannot produce messages")

    def _round_messages(self, k: int) -> np.ndarray:
        # one message per Byzantine agent per round; per-edge heterogeneous
        # delivery would replace these rows with a per-recipient lookup
        if not self.net.byzantine_ids:
            return self.x
        msgs = self.x.copy()
        for v in self.net.byzantine_ids:
            msgs[v] = self._attack_message(v, k)
        return msgs

    def _update_regular(self, w: int, msgs: np.ndarray, alpha: float, k: int) -> np.ndarray:
        rng = self.sample_streams[w].at_round(k)
        x_w = self.x[w]
        idx = rng.integers(0, self.problem.n_samples, size=self.batch_size)
        if self.algorithm == "dpsgd":
            g = self.problem.sample_grads(w, idx, x_w).mean(axis=0)
            new = dpsgd_step(msgs, self.weights[w], g, alpha)
        else:
            tv = tv_subgradient(x_w, msgs[self.nb_ids[w]], self.lam)
            if self.algorithm == "drsa":
                g = self.problem.sample_grads(w, idx, x_w).mean(axis=0)
                new = drsa_step(x_w, g, tv, alpha)
            else:
                if self.algorithm == "bravo-saga":
                    g = saga_grad(self.saga[w], self.problem, w, idx, x_w)
                else:
                    g = lsvrg_grad(self.lsvrg[w], self.problem, w, idx, x_w, rng)
                new = bravo_step(x_w, g, tv, alpha)
        self.grad_windows[w].append(g)
        return new

    def _update_shadow(self, v: int, msgs: np.ndarray, alpha: float, k: int) -> np.ndarray:
        # the attacker's honestly computed model: plain stochastic
        # subgradient update on its own shard, no variance reduction
        rng = self.shadow_streams[v].at_round(k)
        x_v = self.x[v]
        idx = rng.integers(0, self.problem.n_samples, size=self.batch_size)
        g = self.problem.sample_grads(v, idx, x_v).mean(axis=0)
        tv = tv_subgradient(x_v, msgs[self.nb_ids[v]], self.lam)
        return drsa_step(x_v, g, tv, alpha)

    def run_round(self, k: int, order=None) -> None:
        """Advance the state from round k to k+1 (synchronous snapshot)."""
        with np.errstate(over="ignore", invalid="ignore"):
            self._run_round(k, order)

    def _run_round(self, k: int, order=None) -> None:
        msgs = self._round_messages(k)
        alpha = step_size(self.schedule, k)
        new_x = self.x.copy()
        agents = list(self.net.regular_ids) if order is None else list(order)
        if self._pool is None:
            for w in agents:
                new_x[w] = self._update_regular(w, msgs, alpha, k)
        else:
            fn = partial(self._update_regular, msgs=msgs, alpha=alpha, k=k)
            for w, val in zip(agents, self._pool.map(fn, agents)):
                new_x[w] = val
        if self.attack.kind == "sign_flip":
            for v in self.net.byzantine_ids:
                new_x[v] = self._update_shadow(v, msgs, alpha, k)
        self.x = new_x
        self.round = k + 1
        finite = np.isfinite(new_x).all(axis=1)
        if not finite.all():
            raise DivergenceError(int(np.flatnonzero(~finite)[0]), k)

    # ----------------------------------------------------------- metrics

    def regular_models(self) -> np.ndarray:
        return self.x[self.regular_index]

    def stacked(self) -> StackedState:
        return StackedState(self.net.regular_ids, self.regular_models().copy())

    def _grad_noise(self) -> float | None:
        total = 0.0
        seen = False
        for w in self.net.regular_ids:
            window = self.grad_windows[w]
            if not window:
                continue
            arr = np.stack(window)
            centered = arr - arr.mean(axis=0)
            total += float(np.mean(np.sum(centered * centered, axis=1)))
            seen = True
        return total if seen else None

    def metrics_row(self, k: int, wall_ms: float | None = None) -> MetricsRow:
        with np.errstate(over="ignore", invalid="ignore"):
            return self._metrics_row(k, wall_ms)

    def _metrics_row(self, k: int, wall_ms: float | None = None) -> MetricsRow:
        models = self.regular_models()
        conv = None
        if self.x_star is not None:
            diff = models - self.x_star.values
            conv = _sat(np.sum(diff * diff))
        accuracy = None
        problem = self.problem
        if (
            getattr(problem, "test_features", None) is not None
            and self.probe_agent is not None
        ):
            accuracy = accuracy_probe(
                self.x[self.probe_agent],
                problem.test_features,
                problem.test_labels,
                problem.n_classes,
            )
        noise = self._grad_noise()
        lyap = None
        if self.track_lyapunov and self.x_star is not None:
            states = self.saga or self.lsvrg
            lyap = _sat(
                theory.lyapunov(
                    self.stacked(),
                    self.x_star,
                    states,
                    step_size(self.schedule, k),
                    self.theory_lip,
                    problem.n_samples,
                )
            )
        return MetricsRow(
            k=k,
            conv_err=conv,
            model_var=_sat(model_variance(models)),
            accuracy=accuracy,
            grad_noise=None if noise is None else _sat(noise),
            lyapunov=lyap,
            wall_ms=wall_ms,
        )


# ------------------------------------------------------------ experiment


def build_network(cfg: ExperimentConfig) -> Network:
    if cfg.topology_edges:
        n = cfg.topology_n or max(max(e) for e in cfg.topology_edges) + 1
        net = network_from_edges(n, cfg.topology_edges)
    else:
        net = generate_erdos_renyi(
            cfg.topology_n, cfg.topology_q, rng_stream(cfg.seed, purpose="topology")
        )
    if cfg.byz_ids:
        net = Network(net.adjacency, cfg.byz_ids)
        if not is_regular_subgraph_connected(net):
            raise ConfigError("byzantine.ids leave the regular subgraph disconnected")
    elif cfg.byz_count > 0:
        net = assign_byzantine(
            net,
            cfg.byz_count,
            rng_stream(cfg.seed, purpose="byzantine"),
            cfg.byz_max_retries,
        )
    elif not is_regular_subgraph_connected(net):
        raise ConfigError("topology is disconnected; regular subgraph must be connected")
    return net


def build_problem(cfg: ExperimentConfig, n_agents: int):
    if cfg.problem_kind == "least_squares":
        if cfg.explicit_samples:
            given = dict(cfg.explicit_samples)
            if set(given) != set(range(n_agents)):
                raise ConfigError(
                    f"problem.samples.* must cover agents 0..{n_agents - 1} exactly"
                )
            return LeastSquaresProblem.from_samples(given)
        return synth_least_squares(n_agents, cfg.synth_samples, cfg.seed)
    features, labels = load_idx_dataset(cfg.images, cfg.labels)
    if labels.size and int(labels.max()) >= cfg.n_classes:
        raise DataError(
            f"label {int(labels.max())} outside problem.classes = {cfg.n_classes}"
        )
    features, labels = subsample(
        features, labels, cfg.subsample, rng_stream(cfg.seed, purpose="subsample")
    )
    rng = rng_stream(cfg.seed, purpose="partition")
    if cfg.partition == "iid":
        problem = partition_iid(features, labels, n_agents, cfg.n_classes, rng)
    else:
        problem = partition_noniid(features, labels, n_agents, cfg.n_classes, rng)
    if cfg.test_images and cfg.test_labels:
        test_features, test_labels = load_idx_dataset(cfg.test_images, cfg.test_labels)
        problem = type(problem)(
            problem.features, problem.labels, cfg.n_classes, test_features, test_labels
        )
    return problem


def _theory_params(cfg: ExperimentConfig, n_regular: int):
    if cfg.problem_kind == "least_squares":
        return theory.TheoryParams.least_squares(n_regular, cfg.theory_epsilon)
    if cfg.theory_mu > 0 and cfg.theory_l > 0:
        return theory.TheoryParams(
            np.full(n_regular, cfg.theory_mu),
            np.full(n_regular, cfg.theory_l),
            cfg.theory_epsilon,
        )
    return None


def run_experiment(cfg: ExperimentConfig, threads: int | None = None) -> RunResult:
    """Build topology, problem, and reference solution, run the configured
    rounds, and log a metrics row every ``metrics_every`` rounds."""
    t0 = time.perf_counter()
    threads = cfg.threads if threads is None else threads
    net = build_network(cfg)
    problem = build_problem(cfg, net.n_agents)
    x_tilde = theory.solve_reference(
        problem, net.regular_ids, cfg.ref_tol, cfg.ref_max_iters
    )
    regular = net.regular_ids
    x_star = StackedState(regular, np.tile(x_tilde, (len(regular), 1)))

    header: dict[str, object] = {}
    for line in config_to_lines(cfg):
        key, _, value = line.partition(" = ")
        header[key] = value
    params = _theory_params(cfg, len(regular))
    a = incidence_matrix(net)
    if a.edges:
        lam0 = theory.lambda0(problem, x_tilde, a)
        sigma_min = repr(min_nonzero_singular(a))
    else:
        lam0, sigma_min = 0.0, ""  # single regular agent: consensus is vacuous
    probe = None
    if getattr(problem, "test_features", None) is not None:
        probe = regular[
            int(rng_stream(cfg.seed, purpose="probe").integers(0, len(regular)))
        ]
    header["info.version"] = "1"
    header["info.n_agents"] = net.n_agents
    header["info.regular_count"] = len(regular)
    header["info.byzantine_ids"] = ",".join(str(v) for v in net.byzantine_ids)
    header["info.probe_agent"] = "" if probe is None else probe
    header["info.lambda0"] = repr(lam0)
    header["info.sigma_min"] = sigma_min
    header["info.lambda_meets_threshold"] = str(cfg.lam >= lam0).lower()
    if params is not None:
        header["info.eta"] = repr(params.eta)
        header["info.epsilon"] = repr(params.epsilon)
        header["info.delta"] = repr(
            theory.delta_bound(params, step_size(cfg.step, 0), cfg.lam, net, problem.p)
        )
        header["info.step_bound"] = repr(theory.theory_step_bound(params, problem.n_samples))

    state = SimulationState(
        net,
        problem,
        cfg.attack,
        cfg.algorithm,
        cfg.step,
        cfg.lam,
        cfg.batch_size,
        cfg.seed,
        x_star=x_star,
        init_value=cfg.init_value,
        track_lyapunov=cfg.lyapunov_enabled,
        theory_lip=params.big_l if params is not None else 1.0,
        grad_noise_window=cfg.grad_noise_window,
        threads=threads,
        probe_agent=probe,
    )
    rows: list[MetricsRow] = []
    diverged = False

    def wall() -> float | None:
        if not cfg.log_wall_time:
            return None
        return (time.perf_counter() - t0) * 1000.0

    try:
        for k in range(cfg.rounds + 1):
            if k % cfg.metrics_every == 0 or k == cfg.rounds:
                rows.append(state.metrics_row(k, wall()))
            if k == cfg.rounds:
                break
            try:
                state.run_round(k)
            except DivergenceError:
                diverged = True
                rows.append(state.metrics_row(k + 1, wall()))
                break
    finally:
        state.close()
    header["info.diverged"] = str(diverged).lower()
    header["info.wall_ms_total"] = repr((time.perf_counter() - t0) * 1000.0)
    return RunResult(rows=rows, header=header, final=state.stacked(), diverged=diverged)


# ------------------------------------------------------------- trace IO


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def write_trace(path, rows) -> None:
    lines = [",".join(TRACE_COLUMNS)]
    for r in rows:
        lines.append(
            ",".join(
                _format_cell(v)
                for v in (r.k, r.conv_err, r.model_var, r.accuracy, r.grad_noise, r.lyapunov, r.wall_ms)
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_header(path, header: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in header.items():
            fh.write(f"{key} = {value}\n")
