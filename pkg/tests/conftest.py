"""Common pytest fixtures for cipherdenoise tests."""

import random
from unittest.mock import patch

import numpy as np
import pytest
from fakeredis import FakeRedis

from cipherdenoise.ledger import SessionLedger
from cipherdenoise.model import demo_linear_model, demo_model
from cipherdenoise.paillier import keygen, keypair_from_primes
from cipherdenoise.protocol import ClientConfig, InferenceClient, InferenceServer, ServerConfig

TINY_SHAPE = (1, 6, 6)


@pytest.fixture
def fake_redis():
    """Create a fake Redis instance for testing."""
    return FakeRedis(decode_responses=False)


@pytest.fixture
def ledger(fake_redis):
    """Create a SessionLedger backed by fake Redis."""
    with patch("cipherdenoise.ledger.redis.from_url", return_value=fake_redis):
        return SessionLedger(
            redis_url="redis://localhost:6379/0",
            server_name="test-server",
            key_prefix="test:",
        )


@pytest.fixture
def toy_keys():
    """p=5, q=7: small enough to enumerate every plaintext."""
    return keypair_from_primes(5, 7)


@pytest.fixture(scope="session")
def keys_32():
    return keygen(32, random.Random("tests:32"))


@pytest.fixture(scope="session")
def keys_128():
    return keygen(128, random.Random("tests:128"))


@pytest.fixture(scope="session")
def other_keys_128():
    return keygen(128, random.Random("tests:other:128"))


@pytest.fixture(scope="session")
def tiny_model():
    """Demo architecture with two channels on a 6x6 slice."""
    return demo_model(seed=0, channels=2, input_shape=TINY_SHAPE)


@pytest.fixture(scope="session")
def tiny_linear_model():
    return demo_linear_model(seed=0, channels=2, input_shape=TINY_SHAPE)


@pytest.fixture
def tiny_image():
    rng = np.random.default_rng(7)
    return rng.uniform(0.0, 1.0, TINY_SHAPE[1:])


@pytest.fixture
def server_config():
    """Server settings that accept the 128-bit test keys."""
    return ServerConfig(seed=1, min_key_bits=128)


@pytest.fixture
def make_pair(keys_128, server_config):
    """Build a (client, server) pair for a model; keyword overrides go to ServerConfig."""

    def build(model, client_seed=1, retain_features=False, **overrides):
        pk, sk = keys_128
        settings = {
            "seed": server_config.seed,
            "min_key_bits": server_config.min_key_bits,
            **overrides,
        }
        client = InferenceClient(
            pk,
            sk,
            ClientConfig(
                seed=client_seed,
                frac_bits=model.frac_bits_input,
                retain_features=retain_features,
            ),
        )
        return client, InferenceServer(model, ServerConfig(**settings))

    return build
