from __future__ import annotations

import secrets

import pytest

from tcr.client import UserCredential
from tcr.module import ModuleState, TrustedModule
from tcr.service import Service
from tcr.storage import Storage


@pytest.fixture
def user_keys():
    return {i: secrets.token_bytes(32) for i in (1, 2, 3, 4)}


@pytest.fixture
def credentials(user_keys):
    return {i: UserCredential(i, key) for i, key in user_keys.items()}


@pytest.fixture
def storage(tmp_path):
    store = Storage(tmp_path / "repo.db", tmp_path / "blobs")
    yield store
    store.close()


@pytest.fixture
def module(user_keys):
    return TrustedModule(ModuleState.fresh(user_keys))


@pytest.fixture
def service(storage, module):
    return Service(storage, module, height=6)
