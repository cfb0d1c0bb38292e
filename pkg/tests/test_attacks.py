import numpy as np
import pytest

from bravo_sim.attacks import (
    AttackSpec,
    gaussian_attack,
    lowerbound_attack,
    sample_duplicate_attack,
    sign_flip_attack,
)
from bravo_sim.core import ConfigError, rng_stream, sign_vec
from bravo_sim.topology import network_from_edges


def test_attack_spec_validation():
    with pytest.raises(ConfigError):
        AttackSpec(kind="nonsense")
    with pytest.raises(ConfigError):
        AttackSpec(kind="gaussian", std=0.0)
    net = network_from_edges(3, [(0, 1), (1, 2)], byzantine_ids=(2,))
    with pytest.raises(ConfigError):
        AttackSpec(kind="sample_duplicate", target=2).validate(net)
    AttackSpec(kind="sample_duplicate", target=0).validate(net)
    with pytest.raises(ConfigError):
        AttackSpec(kind="none").validate(net)  # byzantine set must be empty


def test_gaussian_attack_moments_and_determinism():
    draws = gaussian_attack(100000, rng_stream(0, 9, "attack", 0), std=100.0)
    assert abs(draws.mean()) <= 5 * 100.0 / np.sqrt(100000)
    assert np.std(draws) == pytest.approx(100.0, rel=0.02)
    again = gaussian_attack(100000, rng_stream(0, 9, "attack", 0), std=100.0)
    assert np.array_equal(draws, again)


def test_sign_flip_attack_values():
    x = np.array([1.0, -2.0])
    assert np.array_equal(sign_flip_attack(x, -4.0), np.array([-4.0, 8.0]))
    assert np.array_equal(sign_flip_attack(x, 1.0), x)
    assert np.array_equal(sign_flip_attack(x, 0.0), np.zeros(2))


def test_sample_duplicate_attack_copies_verbatim():
    target = np.array([0.3, 0.7])
    out = sample_duplicate_attack(target)
    assert np.array_equal(out, target)
    out[0] = 99.0  # the copy must not alias the regular agent's model
    assert target[0] == 0.3


def test_lowerbound_attack_construction():
    z = lowerbound_attack(3)
    assert np.array_equal(z, -np.ones(3))
    assert np.array_equal(sign_vec(np.zeros(3) - z), np.ones(3))
    assert np.array_equal(lowerbound_attack(3), z)  # stateless, round-independent
