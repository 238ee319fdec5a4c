import contextlib
import os
import secrets
import subprocess

import pytest

from protbox import crypto
from protbox.identity import SoftwareRoot, TrustStore, software_token_create


@pytest.fixture(scope="session")
def test_root():
    return SoftwareRoot("protbox test root")


@pytest.fixture(scope="session")
def other_root():
    return SoftwareRoot("untrusted root")


@pytest.fixture(scope="session")
def truststore(test_root):
    store = TrustStore()
    store.add(test_root.certificate)
    return store


@pytest.fixture(scope="session")
def alice_token(test_root):
    return software_token_create("alice", test_root)


@pytest.fixture(scope="session")
def bob_token(test_root):
    return software_token_create("bob", test_root)


@pytest.fixture
def pair_key():
    return crypto.generate_pair_key()


@pytest.fixture
def rng():
    return secrets.token_bytes


def make_cloud_users(base_path, count, config=None, kdkp=None):
    """N engines, each syncing its prot folder against its own replica of a
    simulated cloud folder. All instances share one pair key (first user's)."""
    from protbox.registry import Registry, STATE_ACTIVE
    from protbox.simulator import SimCloud, SimConfig
    from protbox.sync import SyncEngine

    replicas = [base_path / f"replica{i}" for i in range(count)]
    for r in replicas:
        r.mkdir(parents=True)
    engines, pairs, prots = [], [], []
    key = None
    for i in range(count):
        prot = base_path / f"user{i}" / "prot"
        prot.mkdir(parents=True)
        registry = Registry(base_path / f"user{i}" / "root", f"user{i}", kdkp=kdkp)
        pair = registry.add_pair(prot, replicas[i])
        if key is None:
            key = pair.key
        else:
            pair.key = key
            pair.state = STATE_ACTIVE
        engines.append(SyncEngine(registry))
        pairs.append(pair)
        prots.append(prot)
    cloud = SimCloud(replicas, config or SimConfig())
    return cloud, engines, pairs, prots


def cycle_all(cloud, engines, pairs, rounds=1, steps_per_round=3):
    for _ in range(rounds):
        for engine, pair in zip(engines, pairs):
            engine.run_cycle(pair)
        for _ in range(steps_per_round):
            cloud.step()


@contextlib.contextmanager
def read_only(path):
    """Make a directory unwritable for the duration, even when running as root
    (permission bits do not bind root, so fall back to the immutable flag)."""
    if os.geteuid() == 0:
        subprocess.run(["chattr", "+i", str(path)], check=True)
        try:
            yield path
        finally:
            subprocess.run(["chattr", "-i", str(path)], check=True)
    else:
        mode = os.stat(path).st_mode
        os.chmod(path, 0o500)
        try:
            yield path
        finally:
            os.chmod(path, mode)
