"""protbox: cloud-agnostic encrypted folder synchronization.

Mirrors a cleartext "prot" folder into an encrypted "shared" folder (the
local replica of a cloud folder), distributes per-folder keys via signed
files exchanged through that same folder, and guarantees tamper detection,
non-destructive conflicts, and recoverability of deleted content.
"""

from .crypto import AlgorithmSpec, PairKey, generate_pair_key, protect_content, unprotect_content
from .registry import BackupPolicy, Pair, Registry, RegistryEntry, load_registry, save_registry
from .simulator import SimCloud, SimConfig
from .sync import SyncEngine, SyncReport

__all__ = [
    "AlgorithmSpec",
    "BackupPolicy",
    "Pair",
    "PairKey",
    "Registry",
    "RegistryEntry",
    "SimCloud",
    "SimConfig",
    "SyncEngine",
    "SyncReport",
    "generate_pair_key",
    "load_registry",
    "protect_content",
    "save_registry",
    "unprotect_content",
]
