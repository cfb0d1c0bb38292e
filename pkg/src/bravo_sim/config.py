"""Experiment configuration: a flat text format with dotted keys.

One ``key = value`` pair per line, ``#`` starts a comment line, unknown
keys are rejected by name. Keys under ``info.`` are ignored on load so a
run header (resolved config plus diagnostics) can be fed back in as a
config. All random streams derive from the single master ``seed``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .algorithms import ALGORITHMS, STEP_KINDS, StepSchedule
from .attacks import ATTACK_KINDS, AttackSpec
from .core import ConfigError


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    rounds: int = 1000
    metrics_every: int = 10
    threads: int = 1
    log_wall_time: bool = False

    topology_n: int = 0
    topology_q: float = 0.5
    topology_edges: tuple[tuple[int, int], ...] = ()

    byz_count: int = 0
    byz_ids: tuple[int, ...] = ()
    byz_max_retries: int = 10000
    attack: AttackSpec = field(default_factory=AttackSpec)

    problem_kind: str = "least_squares"
    synth_samples: int = 0
    explicit_samples: tuple[tuple[int, tuple[float, ...]], ...] = ()
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    partition: str = "iid"
    subsample: int = 0
    n_classes: int = 10

    algorithm: str = "drsa"
    lam: float = 0.0
    batch_size: int = 1
    step: StepSchedule = field(default_factory=StepSchedule)
    init_value: float = 0.0

    ref_tol: float = 1e-3
    ref_max_iters: int = 10000

    theory_mu: float = 0.0  # 0 = unset; least-squares implies mu = L = 1
    theory_l: float = 0.0
    theory_epsilon: float = 0.0  # 0 = default fraction of the admissible range

    lyapunov_enabled: bool = False
    grad_noise_window: int = 100


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got '{raw}'") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got '{raw}'") from None


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected true/false, got '{raw}'")


def _parse_edges(key: str, raw: str) -> tuple[tuple[int, int], ...]:
    if not raw:
        return ()
    edges = []
    for tok in raw.split(","):
        parts = tok.strip().split("-")
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected 'u-v' pairs, got '{tok}'")
        edges.append((_parse_int(key, parts[0]), _parse_int(key, parts[1])))
    return tuple(edges)


def _parse_int_list(key: str, raw: str) -> tuple[int, ...]:
    if not raw:
        return ()
    return tuple(_parse_int(key, tok.strip()) for tok in raw.split(","))


def _parse_float_list(key: str, raw: str) -> tuple[float, ...]:
    return tuple(_parse_float(key, tok.strip()) for tok in raw.split(",") if tok.strip())


def parse_config_text(text: str) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{stripped}'")
        key, _, value = stripped.partition("=")
        pairs[key.strip()] = value.strip()
    return resolve_config(pairs)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def resolve_config(pairs: dict[str, str]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    samples: dict[int, tuple[float, ...]] = {}
    step_kind, step_alpha = cfg.step.kind, cfg.step.alpha
    attack_kw = {}
    simple = {
        "seed": ("seed", _parse_int),
        "rounds": ("rounds", _parse_int),
        "metrics_every": ("metrics_every", _parse_int),
        "threads": ("threads", _parse_int),
        "log_wall_time": ("log_wall_time", _parse_bool),
        "topology.n": ("topology_n", _parse_int),
        "topology.q": ("topology_q", _parse_float),
        "topology.edges": ("topology_edges", _parse_edges),
        "byzantine.count": ("byz_count", _parse_int),
        "byzantine.ids": ("byz_ids", _parse_int_list),
        "byzantine.max_retries": ("byz_max_retries", _parse_int),
        "problem.kind": ("problem_kind", str),
        "problem.synth_samples": ("synth_samples", _parse_int),
        "problem.images": ("images", str),
        "problem.labels": ("labels", str),
        "problem.test_images": ("test_images", str),
        "problem.test_labels": ("test_labels", str),
        "problem.partition": ("partition", str),
        "problem.subsample": ("subsample", _parse_int),
        "problem.classes": ("n_classes", _parse_int),
        "algorithm.name": ("algorithm", str),
        "algorithm.lambda": ("lam", _parse_float),
        "algorithm.batch_size": ("batch_size", _parse_int),
        "init.value": ("init_value", _parse_float),
        "reference.tol": ("ref_tol", _parse_float),
        "reference.max_iters": ("ref_max_iters", _parse_int),
        "theory.mu": ("theory_mu", _parse_float),
        "theory.l": ("theory_l", _parse_float),
        "theory.epsilon": ("theory_epsilon", _parse_float),
        "lyapunov.enabled": ("lyapunov_enabled", _parse_bool),
        "grad_noise.window": ("grad_noise_window", _parse_int),
    }
    updates: dict[str, object] = {}
    for key, raw in pairs.items():
        if key.startswith("info."):
            continue
        if key in simple:
            attr, parse = simple[key]
            value = parse(key, raw) if parse is not str else raw
            updates[attr] = value
        elif key == "step.kind":
            step_kind = raw
        elif key == "step.alpha":
            step_alpha = _parse_float(key, raw)
        elif key == "attack.kind":
            attack_kw["kind"] = raw
        elif key == "attack.std":
            attack_kw["std"] = _parse_float(key, raw)
        elif key == "attack.c":
            attack_kw["c"] = _parse_float(key, raw)
        elif key == "attack.target":
            attack_kw["target"] = _parse_int(key, raw)
        elif key.startswith("problem.samples."):
            agent = _parse_int(key, key.rsplit(".", 1)[1])
            samples[agent] = _parse_float_list(key, raw)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    if "kind" in attack_kw and attack_kw["kind"] not in ATTACK_KINDS:
        raise ConfigError(f"attack.kind: unknown attack '{attack_kw['kind']}'")
    if step_kind not in STEP_KINDS:
        raise ConfigError(f"step.kind: unknown schedule '{step_kind}'")
    updates["step"] = StepSchedule(step_kind, step_alpha)
    updates["attack"] = AttackSpec(**attack_kw)
    if samples:
        updates["explicit_samples"] = tuple(sorted(samples.items()))
    cfg = replace(cfg, **updates)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm.name: unknown algorithm '{cfg.algorithm}'")
    if cfg.problem_kind not in ("least_squares", "softmax"):
        raise ConfigError(f"problem.kind: unknown problem '{cfg.problem_kind}'")
    if cfg.partition not in ("iid", "noniid"):
        raise ConfigError(f"problem.partition: expected iid or noniid, got '{cfg.partition}'")
    if cfg.rounds < 0:
        raise ConfigError("rounds must be nonnegative")
    if cfg.metrics_every < 1:
        raise ConfigError("metrics_every must be at least 1")
    if cfg.batch_size < 1:
        raise ConfigError("algorithm.batch_size must be at least 1")
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    if cfg.topology_n <= 0 and not cfg.topology_edges:
        raise ConfigError("topology.n (or topology.edges) is required")
    if cfg.algorithm.startswith("bravo-") and cfg.step.kind != "constant":
        raise ConfigError(f"{cfg.algorithm} requires a constant step size")
    if cfg.lam < 0:
        raise ConfigError("algorithm.lambda must be nonnegative")
    if cfg.byz_ids and cfg.byz_count and len(cfg.byz_ids) != cfg.byz_count:
        raise ConfigError("byzantine.ids and byzantine.count disagree")
    n_byz = len(cfg.byz_ids) if cfg.byz_ids else cfg.byz_count
    if cfg.attack.kind == "none" and n_byz > 0:
        raise ConfigError("byzantine agents present but attack.kind is 'none'")
    if cfg.problem_kind == "softmax" and not (cfg.images and cfg.labels):
        raise ConfigError("softmax problem requires problem.images and problem.labels")
    if cfg.problem_kind == "least_squares" and cfg.synth_samples <= 0 and not cfg.explicit_samples:
        raise ConfigError(
            "least_squares problem requires problem.synth_samples or problem.samples.<agent>"
        )


def config_to_lines(cfg: ExperimentConfig) -> list[str]:
    """Serialize with every default expanded; parses back to an equal config."""
    lines = [
        f"seed = {cfg.seed}",
        f"rounds = {cfg.rounds}",
        f"metrics_every = {cfg.metrics_every}",
        f"threads = {cfg.threads}",
        f"log_wall_time = {str(cfg.log_wall_time).lower()}",
        f"topology.n = {cfg.topology_n}",
        f"topology.q = {cfg.topology_q!r}",
        f"topology.edges = {','.join(f'{u}-{v}' for u, v in cfg.topology_edges)}",
        f"byzantine.count = {cfg.byz_count}",
        f"byzantine.ids = {','.join(str(w) for w in cfg.byz_ids)}",
        f"byzantine.max_retries = {cfg.byz_max_retries}",
        f"attack.kind = {cfg.attack.kind}",
        f"attack.std = {cfg.attack.std!r}",
        f"attack.c = {cfg.attack.c!r}",
        f"attack.target = {cfg.attack.target}",
        f"problem.kind = {cfg.problem_kind}",
        f"problem.synth_samples = {cfg.synth_samples}",
        f"problem.images = {cfg.images}",
        f"problem.labels = {cfg.labels}",
        f"problem.test_images = {cfg.test_images}",
        f"problem.test_labels = {cfg.test_labels}",
        f"problem.partition = {cfg.partition}",
        f"problem.subsample = {cfg.subsample}",
        f"problem.classes = {cfg.n_classes}",
        f"algorithm.name = {cfg.algorithm}",
        f"algorithm.lambda = {cfg.lam!r}",
        f"algorithm.batch_size = {cfg.batch_size}",
        f"step.kind = {cfg.step.kind}",
        f"step.alpha = {cfg.step.alpha!r}",
        f"init.value = {cfg.init_value!r}",
        f"reference.tol = {cfg.ref_tol!r}",
        f"reference.max_iters = {cfg.ref_max_iters}",
        f"theory.mu = {cfg.theory_mu!r}",
        f"theory.l = {cfg.theory_l!r}",
        f"theory.epsilon = {cfg.theory_epsilon!r}",
        f"lyapunov.enabled = {str(cfg.lyapunov_enabled).lower()}",
        f"grad_noise.window = {cfg.grad_noise_window}",
    ]
    for agent, values in cfg.explicit_samples:
        lines.append(f"problem.samples.{agent} = {','.join(repr(v) for v in values)}")
    return lines
