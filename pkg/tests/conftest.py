# This file is part of the bicr package.
#
# Copyright (c) 2026-present, the bicr contributors.
#
# For the full copyright and license information, please view
# the LICENSE.txt file that was distributed with this source code.

import os

import pytest

from bicr.lifelong import build_stream
from bicr.numkernel import make_rng

from .fixtures import tiny_config


def pytest_collection_modifyitems(config, items):
    if os.environ.get('BICR_RUN_SLOW'):
        return
    skip_slow = pytest.mark.skip(reason='set BICR_RUN_SLOW=1 to run')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Return a fresh deterministic generator."""
    return make_rng(1234)


@pytest.fixture(params=[0, 1, 2])
def seeded_rng(request):
    """Return generators for a few seeds."""
    return make_rng(request.param)


@pytest.fixture
def tiny_cfg():
    """Return a configuration small enough for a run in a second."""
    return tiny_config()


@pytest.fixture
def tiny_stream(tiny_cfg):
    """Return the synthetic stream of :func:`tiny_cfg`."""
    return build_stream(tiny_cfg)


@pytest.fixture
def clean_environ(monkeypatch):
    """Drop every ``BICR_`` override from the process environment."""
    for key in list(os.environ):
        if key.startswith('BICR_'):
            monkeypatch.delenv(key)
    return os.environ
