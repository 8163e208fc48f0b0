import socket

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """The whole suite must run offline; any socket connect is a bug."""

    def guard(*args, **kwargs):
        raise AssertionError("test attempted a network connection")

    monkeypatch.setattr(socket.socket, "connect", guard)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
