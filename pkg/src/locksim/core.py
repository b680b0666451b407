"""Shared building blocks: stable hashing, manager rings, token issuance."""

from __future__ import annotations

import bisect

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a. Chosen because it is trivially portable and seedless."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _mix64(z: int) -> int:
    """Finalizing avalanche; FNV alone clusters on short structured keys."""
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def ring_hash(key: str) -> int:
    return _mix64(fnv1a64(key.encode()))


class HashRing:
    """Consistent-hash ring mapping resources to manager nodes.

    Each manager contributes ``vpoints`` virtual points so that removing one
    manager remaps roughly 1/len(nodes) of the resource space instead of
    reshuffling everything.
    """

    VPOINTS = 64

    def __init__(self, nodes: list[int], vpoints: int = VPOINTS) -> None:
        if not nodes:
            raise ValueError("ring needs at least one node")
        pts = []
        for node in nodes:
            for i in range(vpoints):
                pts.append((ring_hash(f"mgr/{node}/{i}"), node))
        pts.sort()
        self._hashes = [h for h, _ in pts]
        self._owners = [n for _, n in pts]
        self.nodes = sorted(nodes)

    def route(self, resource: int) -> int:
        h = ring_hash(f"res/{resource}")
        i = bisect.bisect_left(self._hashes, h)
        if i == len(self._hashes):
            i = 0
        return self._owners[i]


def issue_token(store: dict, resource: int) -> int:
    """Next grant token for a resource, persisted in the manager's durable
    store so a recovered manager never reuses a token. First token is 1."""
    key = ("tok", resource)
    token = store.get(key, 0) + 1
    store[key] = token
    return token


def peek_token(store: dict, resource: int) -> int:
    return store.get(("tok", resource), 0)


def advance_token(store: dict, resource: int, floor: int) -> None:
    """Raise the counter so future tokens start above ``floor``."""
    key = ("tok", resource)
    if store.get(key, 0) < floor:
        store[key] = floor


def home_region(resource: int, num_regions: int) -> int:
    """Static region affinity used by workload bias and region-pool rings."""
    return resource % num_regions
