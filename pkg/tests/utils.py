import os
import tempfile
import unittest
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from fedlora.aggregation import ClientUpdate
from fedlora.data import TaskSpec
from fedlora.fedproto import FedConfig
from fedlora.lora_model import AdapterPair, AdapterSet


_TRUE_VALUES = {"y", "yes", "t", "true", "on", "1"}
_FALSE_VALUES = {"n", "no", "f", "false", "off", "0"}


def parse_flag_from_env(key, default=False):
    try:
        value = os.environ[key]
    except KeyError:
        # KEY isn't set, default to `default`.
        _value = default
    else:
        # KEY is set, convert it to True or False.
        if value.lower() in _TRUE_VALUES:
            _value = True
        elif value.lower() in _FALSE_VALUES:
            _value = False
        else:
            # More values are supported, but let's keep the message simple.
            raise ValueError(f"If set, {key} must be yes or no.")
    return _value


_run_slow_tests = parse_flag_from_env("RUN_SLOW", default=False)
_run_socket_tests = parse_flag_from_env("RUN_SOCKET", default=True)


def slow(test_case):
    """
    Decorator marking a test as slow.

    Slow tests are skipped by default. Set the RUN_SLOW environment variable
    to a truthy value to run them.

    """
    if not _run_slow_tests:
        test_case = unittest.skip("test is slow")(test_case)
    return test_case


def require_socket(test_case):
    """
    Decorator marking a test that opens TCP sockets on the loopback interface.

    These tests run by default. Set the RUN_SOCKET environment variable to a falsy value to skip them.

    """
    if not _run_socket_tests:
        test_case = unittest.skip("test requires loopback sockets")(test_case)
    return test_case


def tiny_task(**overrides) -> TaskSpec:
    """Three small non-IID clients; fast enough for protocol tests."""
    params = dict(
        vocab=24,
        classes=3,
        seq_len=6,
        clients=3,
        client_sizes=(12, 6, 16),
        dialect_shift=0.8,
        label_skew=0.7,
        seed=0,
    )
    params.update(overrides)
    return TaskSpec(**params)


def tiny_config(task: TaskSpec = None, **overrides) -> FedConfig:
    params = dict(
        rounds=2,
        local_epochs=1,
        rank=2,
        alpha=4.0,
        d=4,
        h=8,
        accumulation=2,
        lr=1e-2,
        pretrain_steps=20,
        client_timeout=5.0,
        registration_timeout=10.0,
        task=task or tiny_task(),
    )
    params.update(overrides)
    return FedConfig(**params)


def random_pair(target, d_out, d_in, rank, seed, alpha=None) -> AdapterPair:
    rng = np.random.default_rng(seed)
    return AdapterPair(
        target,
        a=rng.normal(size=(rank, d_in)),
        b=rng.normal(size=(d_out, rank)),
        alpha=float(rank) if alpha is None else alpha,
    )


def scalar_update(client_id, b_value, n_k, round=1, a_value=1.0) -> ClientUpdate:
    """1x1 rank-1 update on `q` with scale 1, i.e. an effective update of `b_value * a_value`."""
    pair = AdapterPair("q", a=[[a_value]], b=[[b_value]], alpha=1.0)
    return ClientUpdate(client_id=client_id, round=round, n_k=n_k, adapters=AdapterSet.from_pairs([pair]))


def assert_adapters_close(test_case, first: AdapterSet, second: AdapterSet, atol=1e-10):
    test_case.assertEqual(first.targets, second.targets)
    for pair, other in zip(first, second):
        np.testing.assert_allclose(pair.delta(), other.delta(), rtol=0, atol=atol)


@contextmanager
def set_current_working_directory_to_temp_dir(*args, **kwargs):
    original_working_dir = str(Path().resolve())
    with tempfile.TemporaryDirectory(*args, **kwargs) as tmp_dir:
        try:
            os.chdir(tmp_dir)
            yield
        finally:
            os.chdir(original_working_dir)
