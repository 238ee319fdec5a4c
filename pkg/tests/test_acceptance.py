"""End-to-end acceptance gate.

Each test exercises one externally stated guarantee at its full size and
prints a single PASS line; a pytest failure is the FAIL line. Run with
`pytest tests/test_acceptance.py -v -s` to see the lines as they complete.
"""

import random
import sys
import time
from pathlib import Path

import pytest
from conftest import make_cloud_users, read_only

from protbox import codec, crypto, keydist
from protbox import events as ev
from protbox import registry as reg
from protbox.errors import FolderReadOnly
from protbox.identity import SoftwareRoot, TrustStore, software_token_create
from protbox.simulator import SimCloud, SimConfig
from protbox.sync import SyncEngine

sys.path.insert(0, str(Path(__file__).parent))
import aes_oracle  # noqa: E402

MIB = 1 << 20


def ok(line):
    print(f"PASS: {line}")


def prot_tree(root: Path):
    return {
        str(p.relative_to(root)).replace("\\", "/"): p.read_bytes()
        for p in root.rglob("*")
        if p.is_file()
    }


def cloud_round(cloud, engines, pairs):
    """One propagation round: every instance syncs, then the cloud settles."""
    for engine, pair in zip(engines, pairs):
        engine.run_cycle(pair)
    cloud.run_until_quiet()


NAME_ALPHABET = (
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
    " ._-()[]{}~!@#$%^&+=,;'"
    "àéîõüßçñøæЖдфломатик中文字符テスト한글παράδειγμα№€"
)


def test_roundtrip_names_and_contents():
    rnd = random.Random(20240817)
    key = crypto.generate_pair_key()
    start = time.monotonic()

    for i in range(10_000):
        name = "".join(rnd.choice(NAME_ALPHABET) for _ in range(rnd.randint(1, 80)))
        assert codec.decrypt_name(key, codec.encrypt_name(key, name)) == name

    for i in range(1_000):
        size = rnd.randint(0, MIB)
        content = rnd.randbytes(size)
        assert crypto.unprotect_content(key, crypto.protect_content(key, content)) == content

    elapsed = time.monotonic() - start
    assert elapsed < 60, f"roundtrip suite took {elapsed:.1f}s"
    ok(f"roundtrip: 10^4 names + 10^3 contents (0B-1MiB) byte-identical in {elapsed:.1f}s")


def test_tamper_suite(tmp_path):
    start = time.monotonic()
    rnd = random.Random(7)
    cloud, engines, pairs, prots = make_cloud_users(tmp_path, 3)

    for i in range(12):
        path = prots[0] / (f"dir{i % 3}/f{i}.bin" if i % 2 else f"f{i}.bin")
        path.parent.mkdir(exist_ok=True)
        path.write_bytes(rnd.randbytes(rnd.randint(1, 4096)))
    for _ in range(4):
        cloud_round(cloud, engines, pairs)
    assert cloud.converged(prots)

    baseline = [prot_tree(p) for p in prots]
    enc_files = [
        str(p.relative_to(cloud.replicas[0])).replace("\\", "/")
        for p in cloud.replicas[0].rglob("*")
        if p.is_file() and not p.name.startswith("_")
    ]
    originals = {rel: (cloud.replicas[0] / rel).read_bytes() for rel in enc_files}
    assert len(enc_files) == 12

    quarantined = 0
    for n in range(1_000):
        rel = rnd.choice(enc_files)
        victim = rnd.randrange(3)
        cloud.tamper(victim, rel, (rnd.randrange(len(originals[rel])), rnd.randrange(1, 256)))
        cloud.run_until_quiet()
        hit = 0
        for engine, pair in zip(engines, pairs):
            before = engine.events.last_seq
            engine.run_cycle(pair)
            if any(e.kind == ev.QUARANTINE for e in engine.events.since(before)):
                hit += 1
        assert hit == 3, f"corruption {n} of {rel}: only {hit}/3 instances quarantined"
        quarantined += 1
        # heal: the author re-uploads the authentic blob
        cloud.write(victim, rel, originals[rel])
        cloud.run_until_quiet()
        for engine, pair in zip(engines, pairs):
            engine.run_cycle(pair)

    assert quarantined == 1_000
    assert [prot_tree(p) for p in prots] == baseline, "a prot folder changed under tampering"
    elapsed = time.monotonic() - start
    assert elapsed < 300, f"tamper suite took {elapsed:.1f}s"
    ok(f"tamper: 1000/1000 corruptions quarantined on all 3 instances, 0 prot changes, {elapsed:.1f}s")


def run_convergence_workload(base, seed):
    rnd = random.Random(seed)
    cloud, engines, pairs, prots = make_cloud_users(base, 3, SimConfig(seed=seed))
    pool = [
        "a.txt", "b.bin", "notes.md",
        "docs/report.docx", "docs/old/draft.txt",
        "src/main.py", "src/lib/util.py", "src/lib/deep/core.py",
        "img/logo.png", "img/icons/x.svg",
    ]
    max_depth = max(p.count("/") + 1 for p in pool)
    live = set()
    for n in range(200):
        instance = rnd.randrange(3)
        path = rnd.choice(pool)
        target = prots[instance] / path
        op = rnd.random()
        if op < 0.25 and path in live and target.exists():
            target.unlink()
            live.discard(path)
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(rnd.randbytes(rnd.randint(0, 2000)))
            live.add(path)
        if rnd.random() < 0.6:
            cloud_round(cloud, engines, pairs)
    for _ in range(max_depth + 2):
        cloud_round(cloud, engines, pairs)
    return cloud, prots, max_depth


def test_convergence(tmp_path):
    start = time.monotonic()
    cloud, prots, max_depth = run_convergence_workload(tmp_path / "run1", seed=11)
    trees = [prot_tree(p) for p in prots]
    assert trees[0] == trees[1] == trees[2], "prot folders diverged"
    assert cloud.converged(prots)

    cloud2, prots2, _ = run_convergence_workload(tmp_path / "run2", seed=11)
    assert [prot_tree(p) for p in prots2] == trees, "workload is not seed-deterministic"

    elapsed = time.monotonic() - start
    assert elapsed < 300, f"convergence suite took {elapsed:.1f}s"
    ok(
        f"convergence: 3 instances, 200 ops, identical prot folders within "
        f"depth+2={max_depth + 2} rounds, seed-deterministic, {elapsed:.1f}s"
    )


def test_no_lost_update(tmp_path):
    from cryptography.hazmat.primitives.asymmetric import rsa

    start = time.monotonic()
    shared_kdkp = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    losses = 0
    for trial in range(100):
        rnd = random.Random(1000 + trial)
        cloud, engines, pairs, prots = make_cloud_users(
            tmp_path / f"t{trial}", 2, kdkp=shared_kdkp
        )
        (prots[0] / "doc.txt").write_bytes(b"base")
        for _ in range(3):
            cloud_round(cloud, engines, pairs)
        content = [b"edit from instance 0", b"edit from instance 1"]
        (prots[0] / "doc.txt").write_bytes(content[0])
        (prots[1] / "doc.txt").write_bytes(content[1])
        # a randomized interleaving of instance cycles and cloud deliveries
        schedule = [rnd.randrange(3) for _ in range(30)]
        for step in schedule:
            if step == 2:
                cloud.step()
            else:
                engines[step].run_cycle(pairs[step])
        for _ in range(10):
            cloud_round(cloud, engines, pairs)
        for prot in prots:
            values = set(prot_tree(prot).values())
            if not ({content[0], content[1]} <= values):
                losses += 1
        assert prot_tree(prots[0]) == prot_tree(prots[1]), f"trial {trial} diverged"
    assert losses == 0
    elapsed = time.monotonic() - start
    ok(f"no-lost-update: 100 interleavings, both edits survive in every prot folder ({elapsed:.1f}s)")


def make_identity_world(tmp_path):
    root_ca = SoftwareRoot("acceptance root")
    store = TrustStore()
    store.add(root_ca.certificate)
    owner = software_token_create("owner", root_ca)
    guest = software_token_create("guest", root_ca)
    return store, owner, guest


def test_key_distribution_end_to_end(tmp_path):
    start = time.monotonic()
    keydist.clear_request_cache()
    store, owner_token, guest_token = make_identity_world(tmp_path)
    shared = tmp_path / "cloud"
    shared.mkdir()

    owner_prot = tmp_path / "owner-prot"
    owner_prot.mkdir()
    owner_reg = reg.Registry(tmp_path / "owner-root", "owner")
    owner_reg.identity = owner_token
    owner_pair = owner_reg.add_pair(owner_prot, shared)
    owner_engine = SyncEngine(owner_reg, truststore=store)
    (owner_prot / "doc.txt").write_bytes(b"payload")
    owner_engine.run_cycle(owner_pair)

    guest_prot = tmp_path / "guest-prot"
    guest_prot.mkdir()
    guest_reg = reg.Registry(tmp_path / "guest-root", "guest")
    guest_reg.identity = guest_token
    guest_pair = guest_reg.add_pair(guest_prot, shared)
    assert guest_pair.state == reg.STATE_AWAITING_KEY
    guest_engine = SyncEngine(guest_reg, truststore=store)

    report = guest_engine.run_cycle(guest_pair)
    assert report.requests_placed == 1
    owner_engine.run_cycle(owner_pair)
    (request_id,) = owner_engine.pending_inbound
    assert owner_engine.pending_inbound[request_id].subject == "guest"
    owner_engine.approve_request(request_id, approve=True)

    report = guest_engine.run_cycle(guest_pair)
    assert report.key_installed
    assert guest_pair.state == reg.STATE_ACTIVE
    assert guest_pair.key.secret == owner_pair.key.secret
    assert guest_pair.key.spec == owner_pair.key.spec

    guest_engine.run_cycle(guest_pair)
    assert (guest_prot / "doc.txt").read_bytes() == b"payload"

    protocol_files = [
        p.name
        for p in shared.iterdir()
        if p.name.startswith("_") and not p.name.startswith(keydist.JOURNAL_PREFIX)
    ]
    assert protocol_files == [], f"request/response files left behind: {protocol_files}"
    elapsed = time.monotonic() - start
    assert elapsed < 30, f"key distribution took {elapsed:.1f}s"
    ok(f"key distribution: requester Active with identical PairKey, folder cleaned, {elapsed:.1f}s")


def test_replay_and_forgery(tmp_path):
    keydist.clear_request_cache()
    store, owner_token, guest_token = make_identity_world(tmp_path)
    rogue_root = SoftwareRoot("rogue root")
    rogue_token = software_token_create("rogue", rogue_root)
    shared = tmp_path / "cloud"
    shared.mkdir()
    (shared / "Zm9v").write_bytes(b"existing content")

    guest_prot = tmp_path / "guest-prot"
    guest_prot.mkdir()
    guest_reg = reg.Registry(tmp_path / "guest-root", "guest")
    guest_reg.identity = guest_token
    guest_pair = guest_reg.add_pair(guest_prot, shared)
    guest_engine = SyncEngine(guest_reg, truststore=store)
    guest_engine.run_cycle(guest_pair)
    request_name = f"_{guest_pair.request_id}"
    request_bytes = (shared / request_name).read_bytes()

    real_key = crypto.generate_pair_key()

    # re-targeting: a genuine response copied under a different request's name
    keydist.clear_request_cache()
    other_reg = reg.Registry(tmp_path / "other-root", "other")
    other_reg.identity = guest_token
    other_name = f"_{keydist.new_request_id()}"
    other_bytes = keydist.build_request(guest_token, other_reg.kdkp.public_key())
    _, genuine = keydist.build_response(other_name, other_bytes, real_key, owner_token)
    (shared / f"{request_name}.{'0' * 32}").write_bytes(genuine)
    guest_engine.run_cycle(guest_pair)
    assert guest_pair.state == reg.STATE_AWAITING_KEY, "re-targeted response was accepted"
    assert guest_pair.key is None

    # forgery: 100 responses signed by an untrusted chain
    rnd = random.Random(3)
    installs = 0
    for i in range(100):
        _, forged = keydist.build_response(request_name, request_bytes, real_key, rogue_token)
        (shared / f"{request_name}.{i:032x}").write_bytes(forged)
        guest_engine.run_cycle(guest_pair)
        if guest_pair.state == reg.STATE_ACTIVE:
            installs += 1
        (shared / f"{request_name}.{i:032x}").unlink()
    assert installs == 0
    assert guest_pair.key is None
    ok("replay/forgery: re-targeted response rejected; 100 forged responses, 0 installs")


def test_deletion_and_restore(tmp_path):
    cloud, engines, pairs, prots = make_cloud_users(tmp_path, 2)
    original = b"the exact original bytes \x00\x01\x02" * 37
    (prots[0] / "doc.txt").write_bytes(original)
    for _ in range(3):
        cloud_round(cloud, engines, pairs)
    assert (prots[1] / "doc.txt").read_bytes() == original

    # deletion arrives through the shared replica of instance 1
    enc_rel = pairs[1].entries["doc.txt"].encrypted_rel
    cloud.delete(1, enc_rel)
    for _ in range(3):
        cloud_round(cloud, engines, pairs)
    assert not (prots[0] / "doc.txt").exists()
    assert not (prots[1] / "doc.txt").exists()
    entry = pairs[0].entries["doc.txt"]
    assert entry.hidden and entry.backups

    content = engines[0].registry.restore_entry(pairs[0], entry)
    assert content == original
    for _ in range(4):
        cloud_round(cloud, engines, pairs)
    assert (prots[0] / "doc.txt").read_bytes() == original
    assert (prots[1] / "doc.txt").read_bytes() == original

    # keep:N bounds the version store over 3N updates
    n = 4
    pairs[1].policy = reg.BackupPolicy(mode=reg.POLICY_KEEP, keep=n)
    for i in range(3 * n):
        (prots[0] / "doc.txt").write_bytes(b"revision %d" % i)
        for _ in range(2):
            cloud_round(cloud, engines, pairs)
    entry1 = pairs[1].entries["doc.txt"]
    assert len(entry1.backups) <= n
    backup_dir = engines[1].registry.backup_dir(pairs[1], entry1)
    assert len(list(backup_dir.iterdir())) <= n
    ok(f"deletion/restore: backup captured, restore byte-exact, keep:{n} held <= {n} over {3 * n} updates")


def test_format_golden_vectors():
    # protected blob arithmetic, empty plaintext under the default algorithms
    key = crypto.PairKey(secret=bytes(range(32)))
    blob = crypto.protect_content(key, b"")
    assert len(blob) == 52
    assert crypto.blob_length(key.spec, 0) == 52
    assert crypto.blob_length(key.spec, 16) == 68

    # layout against the independent AES oracle, fixed IV
    iv = bytes(range(16))
    blob = crypto.protect_content(key, b"golden", rng=lambda n: iv[:n])
    expected_ct = aes_oracle.cbc_encrypt(key.secret, iv, aes_oracle.pkcs5_pad(b"golden"))
    assert blob[20:36] == iv and blob[36:] == expected_ct

    # name codec against the oracle's frozen vector
    zero = crypto.PairKey(secret=bytes(32))
    assert codec.encrypt_name(zero, "a") == "tKXpivaBCoO99SsUroIsNw=="

    # protocol file naming
    assert keydist.REQUEST_NAME_RE.match("_" + "0af3" * 8)
    assert not keydist.REQUEST_NAME_RE.match("_" + "0af3" * 8 + "0")
    assert keydist.RESPONSE_NAME_RE.match("_" + "a" * 32 + "." + "b" * 32)
    assert not keydist.RESPONSE_NAME_RE.match("Zm9vLmJhcg==")

    # sealed registry container header
    rkey = crypto.derive_registry_key("pw", bytes(range(16)), 10_000)
    sealed = crypto.seal_registry(rkey, b"body")
    assert sealed[:4] == b"PBRG"
    assert sealed[4] == 1 and sealed[5] == 0
    assert sealed[6:22] == bytes(range(16))
    assert int.from_bytes(sealed[22:26], "big") == 10_000
    ok("format golden: blob arithmetic, filename regexes, container header bit-exact")


def test_read_only_shared_folder(tmp_path):
    keydist.clear_request_cache()
    store, owner_token, guest_token = make_identity_world(tmp_path)
    shared = tmp_path / "cloud"
    shared.mkdir()
    (shared / "Zm9v").write_bytes(b"existing")
    prot = tmp_path / "prot"
    prot.mkdir()
    registry = reg.Registry(tmp_path / "root", "guest")
    registry.identity = guest_token
    pair = registry.add_pair(prot, shared)
    engine = SyncEngine(registry, truststore=store)

    with read_only(shared):
        with pytest.raises(FolderReadOnly):
            keydist.place_request(shared, b"probe")
        report = engine.run_cycle(pair)  # must not raise
    assert report.errors, "read-only condition was not surfaced"
    assert any(e.kind == ev.PAIR_SUSPENDED for e in engine.events.since(0))
    ok("read-only shared folder: FolderReadOnly surfaced via report and event, no crash")
