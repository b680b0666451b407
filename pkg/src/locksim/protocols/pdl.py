"""Quorum-replicated lock service.

A fixed replica group runs a leader-based majority-replicated command log.
Lock commands (acquire / release / force-release) are appended at the leader,
replicated to followers, flushed durably before they are acknowledged, and
applied in log order by every member, so all members converge on the same
FIFO lock table. Grants carry no expiry: a lock is freed only by an explicit
release or by a force-release the leader proposes once the holder's
keepalive pings have been silent past the liveness timeout.

Leader election: a member whose election timer fires starts a new term and
asks the group for votes. A voter grants when the candidate's log is at
least as complete as its own, with equal logs breaking ties toward the
lower node id. Terms, votes, and the log live in the durable store and
survive crashes; roles, commit point, and the applied lock table are
volatile and are rebuilt from the log after recovery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .base import LockEngine, NodeMux

FOLLOWER = 0
CANDIDATE = 1
LEADER = 2


@dataclass(frozen=True)
class PDLConfig:
    group_size: int = 5
    members: Optional[tuple] = None  # node ids; defaults to 0..group_size-1
    flush_us: int = 1500
    election_timeout_base_us: Optional[int] = None  # default: 5x intra rtt
    heartbeat_us: Optional[int] = None              # default: 1.5x intra rtt
    client_liveness_timeout_us: int = 400_000

    def member_list(self) -> list[int]:
        if self.members is not None:
            return list(self.members)
        return list(range(self.group_size))


class PDLEngine(LockEngine):
    """One engine instance owning the replica group plus all client stubs."""

    name = "pdl"

    def __init__(self, kernel, mux: NodeMux, collector, cfg: PDLConfig,
                 channel: str = "pdl") -> None:
        super().__init__(kernel, mux, collector)
        self.cfg = cfg
        self.channel = channel
        self.members = cfg.member_list()
        self.majority = len(self.members) // 2 + 1
        intra = kernel.topology.intra_rtt_us
        self.election_base_us = cfg.election_timeout_base_us or 5 * intra
        self.heartbeat_us = cfg.heartbeat_us or max(1, (3 * intra) // 2)
        self._election_rng = {
            m: kernel.stream(f"{channel}/elect/{m}") for m in self.members
        }
        # Volatile per-member state; durable state lives in kernel.durable.
        self.role: dict[int, int] = {}
        self.leader_hint: dict[int, int] = {}
        self.commit_index: dict[int, int] = {}
        self.last_applied: dict[int, int] = {}
        self.next_index: dict[tuple[int, int], int] = {}
        self.match_index: dict[tuple[int, int], int] = {}  # (leader, peer)
        self.votes: dict[int, set] = {}
        self.flushed_index: dict[int, int] = {}
        # Highest log position verified equal to the CURRENT term's leader log
        # (overwritten per accepted append, cleared on term change). Acks
        # report min(verified, flushed) so a stale non-conflicting tail from
        # an older term can never inflate the leader's match accounting.
        self.ack_match: dict[int, int] = {}
        self._flush_pending: dict[int, bool] = {}
        self._election_due: dict[int, int] = {}
        # Applied lock-table state, rebuilt deterministically from the log.
        self.holders: dict[int, dict] = {}   # member -> {res: (cid, rid, token, node)}
        self.queues: dict[int, dict] = {}    # member -> {res: [(cid, rid, node)]}
        self.token_at: dict[int, dict] = {}  # member -> {res: last token}
        # Leader-side bookkeeping (meaningful only at the current leader).
        self.last_ping: dict[int, int] = {}     # resource -> last keepalive
        self._forcing: dict[int, int] = {}      # resource -> token being forced
        self._rel_waiters: dict[tuple, int] = {}  # (cid, rid) -> node to ack
        # Every (index, term, command) a leader has applied; the durability
        # checker compares this against the surviving log after a run.
        self.committed_records: list[tuple[int, int, tuple]] = []
        # Client-side stubs.
        self.client_hint: dict[int, int] = {}
        self.outstanding: dict[tuple, dict] = {}
        self.held: dict[tuple, dict] = {}
        self.stats = {
            "elections": 0, "grants": 0, "redirects": 0,
            "force_releases": 0, "commits": 0,
        }

    # ---------------------------------------------------------------- setup

    def install(self) -> None:
        for node in range(self.kernel.topology.num_nodes):
            self.mux.register(node, self.channel,
                              self._make_on_message(node),
                              self._make_on_timer(node))
            self.client_hint[node] = self.members[0]
        for m in self.members:
            d = self.kernel.durable(m)
            d.setdefault("log", [])
            d.setdefault("term", 1)
            d.setdefault("voted", None)
            self._reset_member(m)
        # The group starts settled: the first member is the running leader,
        # elections happen only when it later stops heartbeating.
        self._become_leader(0, self.members[0], initial=True)
        for m in self.members[1:]:
            self._arm_election(m)
        self.kernel.add_recover_listener(self._on_recover)

    def _reset_member(self, m: int) -> None:
        self.role[m] = FOLLOWER
        self.leader_hint[m] = self.members[0]
        self.commit_index[m] = 0
        self.last_applied[m] = 0
        self.flushed_index[m] = len(self.kernel.durable(m)["log"])
        self._flush_pending[m] = False
        self.ack_match[m] = 0
        self.holders[m] = {}
        self.queues[m] = {}
        self.token_at[m] = {}
        self.votes[m] = set()

    def _on_recover(self, node: int) -> None:
        if node in self.role:
            self._reset_member(node)
            self._arm_election(node)

    # --------------------------------------------------------------- timers

    def _arm_election(self, m: int) -> None:
        delay = int(self.election_base_us * (0.5 + self._election_rng[m].random()))
        due = self.kernel.now + delay
        self._election_due[m] = due
        self.mux.set_timer(m, delay, self.channel,
                           ("elect", self.kernel.crash_count[m], due))

    def _make_on_timer(self, node: int):
        def on_timer(now: int, tag) -> None:
            kind = tag[0]
            if kind == "elect":
                if tag[1] != self.kernel.crash_count[node]:
                    return
                if self._election_due.get(node) != tag[2]:
                    return  # superseded by a later reset
                if self.role[node] != LEADER:
                    self._start_election(now, node)
            elif kind == "hb":
                if tag[1] != self.kernel.crash_count[node]:
                    return
                if self.role[node] == LEADER:
                    self._broadcast_append(node)
                    self._sweep_liveness(now, node)
                    self.mux.set_timer(node, self.heartbeat_us, self.channel, tag)
            elif kind == "flush":
                if tag[1] != self.kernel.crash_count[node]:
                    return
                self._flush_done(now, node)
            elif kind == "ping":
                self._client_ping(now, node, tag)
        return on_timer

    def _arm_flush(self, node: int) -> None:
        if not self._flush_pending[node]:
            self._flush_pending[node] = True
            self.mux.set_timer(node, self.cfg.flush_us, self.channel,
                               ("flush", self.kernel.crash_count[node]))

    def _flush_done(self, now: int, node: int) -> None:
        self._flush_pending[node] = False
        self.flushed_index[node] = len(self.kernel.durable(node)["log"])
        if self.role[node] == LEADER:
            self.match_index[(node, node)] = self.flushed_index[node]
            self._advance_commit(now, node)
        else:
            leader = self.leader_hint[node]
            if leader is not None and leader != node:
                self.mux.send(node, leader, self.channel,
                              ("ae_ack", self.kernel.durable(node)["term"],
                               node, True,
                               min(self.ack_match[node], self.flushed_index[node])))

    # ------------------------------------------------------------- election

    def _start_election(self, now: int, m: int) -> None:
        d = self.kernel.durable(m)
        d["term"] += 1
        d["voted"] = m
        self.ack_match[m] = 0
        self.role[m] = CANDIDATE
        self.votes[m] = {m}
        self.stats["elections"] += 1
        log = d["log"]
        last_term = log[-1][0] if log else 0
        for peer in self.members:
            if peer != m:
                self.mux.send(m, peer, self.channel,
                              ("rv", d["term"], m, len(log), last_term))
        self._arm_election(m)
        self._maybe_win(now, m)

    def _handle_rv(self, now: int, voter: int, msg) -> None:
        _, term, cand, cand_len, cand_last_term = msg
        d = self.kernel.durable(voter)
        if term > d["term"]:
            d["term"] = term
            d["voted"] = None
            self.ack_match[voter] = 0
            self._step_down(voter)
        granted = False
        if term == d["term"] and d["voted"] in (None, cand):
            log = d["log"]
            mine = (log[-1][0] if log else 0, len(log))
            theirs = (cand_last_term, cand_len)
            if theirs > mine or (theirs == mine and cand <= voter):
                granted = True
                d["voted"] = cand
                self._arm_election(voter)
        self.mux.send(voter, cand, self.channel,
                      ("rv_ack", d["term"], granted, voter))

    def _handle_rv_ack(self, now: int, m: int, msg) -> None:
        _, term, granted, voter = msg
        d = self.kernel.durable(m)
        if term > d["term"]:
            d["term"] = term
            d["voted"] = None
            self.ack_match[m] = 0
            self._step_down(m)
            return
        if self.role[m] != CANDIDATE or term != d["term"] or not granted:
            return
        self.votes[m].add(voter)
        self._maybe_win(now, m)

    def _maybe_win(self, now: int, m: int) -> None:
        if self.role[m] == CANDIDATE and len(self.votes[m]) >= self.majority:
            self._become_leader(now, m)

    def _become_leader(self, now: int, m: int, initial: bool = False) -> None:
        self.role[m] = LEADER
        self.leader_hint[m] = m
        log = self.kernel.durable(m)["log"]
        for peer in self.members:
            self.next_index[(m, peer)] = len(log) + 1
            if peer != m:
                self.match_index[(m, peer)] = 0
        self.match_index[(m, m)] = self.flushed_index[m]
        self.last_ping = {}
        self._forcing = {}
        self._rel_waiters = {}
        if not initial:
            for res in self.holders[m]:
                self.last_ping[res] = now
            self._resend_grants(m)
        self._broadcast_append(m)
        self.mux.set_timer(m, self.heartbeat_us, self.channel,
                           ("hb", self.kernel.crash_count[m]))

    def _step_down(self, m: int) -> None:
        self.role[m] = FOLLOWER
        self._arm_election(m)

    def _resend_grants(self, m: int) -> None:
        # A new leader cannot know which grant replies were delivered;
        # re-sending is idempotent at the client stub.
        for res, (cid, rid, token, node) in self.holders[m].items():
            self.mux.send(m, node, self.channel, ("grant", cid, rid, res, token))

    # ---------------------------------------------------------- replication

    def _broadcast_append(self, m: int) -> None:
        d = self.kernel.durable(m)
        log = d["log"]
        for peer in self.members:
            if peer == m:
                continue
            ni = self.next_index[(m, peer)]
            prev_idx = ni - 1
            prev_term = log[prev_idx - 1][0] if prev_idx >= 1 else 0
            self.mux.send(m, peer, self.channel,
                          ("ae", d["term"], m, prev_idx, prev_term,
                           log[ni - 1:], self.commit_index[m]))

    def _handle_ae(self, now: int, f: int, msg) -> None:
        _, term, leader, prev_idx, prev_term, entries, leader_commit = msg
        d = self.kernel.durable(f)
        if term < d["term"]:
            self.mux.send(f, leader, self.channel,
                          ("ae_ack", d["term"], f, False, 0))
            return
        if term > d["term"]:
            d["term"] = term
            d["voted"] = None
            self.ack_match[f] = 0
        self.role[f] = FOLLOWER
        self.leader_hint[f] = leader
        self._arm_election(f)
        log = d["log"]
        if prev_idx > len(log) or (prev_idx >= 1 and log[prev_idx - 1][0] != prev_term):
            self.mux.send(f, leader, self.channel,
                          ("ae_ack", d["term"], f, False, min(prev_idx - 1, len(log))))
            return
        changed = False
        for i, entry in enumerate(entries):
            idx = prev_idx + 1 + i  # 1-based log position of this entry
            if idx <= len(log):
                if log[idx - 1] != entry:
                    del log[idx - 1:]
                    self.flushed_index[f] = min(self.flushed_index[f], len(log))
                    log.append(entry)
                    changed = True
            else:
                log.append(entry)
                changed = True
        self.ack_match[f] = prev_idx + len(entries)
        new_commit = min(leader_commit, len(log))
        if new_commit > self.commit_index[f]:
            self.commit_index[f] = new_commit
            self._apply_committed(now, f)
        if changed or self.flushed_index[f] < len(log):
            self._arm_flush(f)
        else:
            self.mux.send(f, leader, self.channel,
                          ("ae_ack", d["term"], f, True,
                           min(self.ack_match[f], self.flushed_index[f])))

    def _handle_ae_ack(self, now: int, m: int, msg) -> None:
        _, term, follower, success, match = msg
        d = self.kernel.durable(m)
        if term > d["term"]:
            d["term"] = term
            d["voted"] = None
            self.ack_match[m] = 0
            self._step_down(m)
            return
        if self.role[m] != LEADER or term != d["term"]:
            return
        if success:
            self.next_index[(m, follower)] = match + 1
            if match > self.match_index.get((m, follower), 0):
                self.match_index[(m, follower)] = match
                self._advance_commit(now, m)
        else:
            self.next_index[(m, follower)] = max(1, match + 1)

    def _advance_commit(self, now: int, m: int) -> None:
        d = self.kernel.durable(m)
        log = d["log"]
        for n in range(len(log), self.commit_index[m], -1):
            if log[n - 1][0] != d["term"]:
                break  # only current-term entries commit by counting
            votes = sum(1 for p in self.members if self.match_index.get((m, p), 0) >= n)
            if votes >= self.majority:
                self.stats["commits"] += n - self.commit_index[m]
                self.commit_index[m] = n
                self._apply_committed(now, m)
                break

    # ------------------------------------------------------- state machine

    def _apply_committed(self, now: int, m: int) -> None:
        log = self.kernel.durable(m)["log"]
        while self.last_applied[m] < self.commit_index[m]:
            self.last_applied[m] += 1
            term, cmd = log[self.last_applied[m] - 1]
            if self.role[m] == LEADER:
                self.committed_records.append((self.last_applied[m], term, cmd))
            self._apply(now, m, cmd)

    def _apply(self, now: int, m: int, cmd: tuple) -> None:
        kind = cmd[0]
        is_leader = self.role[m] == LEADER
        if kind == "acq":
            _, cid, rid, res, node = cmd
            cur = self.holders[m].get(res)
            if cur is not None and cur[0] == cid and cur[1] == rid:
                if is_leader:
                    self.mux.send(m, node, self.channel,
                                  ("grant", cid, rid, res, cur[2]))
                return
            q = self.queues[m].setdefault(res, [])
            if cur is not None or q:
                if not any(w[0] == cid and w[1] == rid for w in q):
                    q.append((cid, rid, node))
                return
            self._grant(now, m, res, cid, rid, node)
        elif kind == "rel":
            _, cid, rid, res, token = cmd
            cur = self.holders[m].get(res)
            if cur is not None and cur[0] == cid and cur[1] == rid and cur[2] == token:
                del self.holders[m][res]
                if is_leader:
                    self.last_ping.pop(res, None)
                self._serve(now, m, res)
            if is_leader:
                node = self._rel_waiters.pop((cid, rid), None)
                if node is not None:
                    self.mux.send(m, node, self.channel, ("rel_ack", cid, rid))
        elif kind == "force":
            _, res, token = cmd
            cur = self.holders[m].get(res)
            if cur is not None and cur[2] == token:
                del self.holders[m][res]
                if is_leader:
                    self.stats["force_releases"] += 1
                    self.last_ping.pop(res, None)
                self._serve(now, m, res)
            if is_leader:
                self._forcing.pop(res, None)

    def _grant(self, now: int, m: int, res: int, cid: int, rid: int, node: int) -> None:
        token = self.token_at[m].get(res, 0) + 1
        self.token_at[m][res] = token
        self.holders[m][res] = (cid, rid, token, node)
        if self.role[m] == LEADER:
            self.stats["grants"] += 1
            self.last_ping[res] = now
            self.mux.send(m, node, self.channel, ("grant", cid, rid, res, token))

    def _serve(self, now: int, m: int, res: int) -> None:
        q = self.queues[m].get(res)
        if q and res not in self.holders[m]:
            cid, rid, node = q.pop(0)
            self._grant(now, m, res, cid, rid, node)

    # ------------------------------------------------- leader client duties

    def _propose(self, now: int, m: int, cmd: tuple) -> None:
        d = self.kernel.durable(m)
        # Retried client commands: skip when an identical one is in flight.
        for _, pending in d["log"][self.last_applied[m]:]:
            if pending == cmd:
                return
        d["log"].append((d["term"], cmd))
        self._arm_flush(m)
        self._broadcast_append(m)

    def _sweep_liveness(self, now: int, m: int) -> None:
        limit = self.cfg.client_liveness_timeout_us
        for res, (cid, rid, token, node) in list(self.holders[m].items()):
            if self._forcing.get(res) == token:
                continue
            if now - self.last_ping.get(res, now) > limit:
                self._forcing[res] = token
                self._propose(now, m, ("force", res, token))

    def _member_client_msg(self, now: int, m: int, msg) -> None:
        kind = msg[0]
        if self.role[m] != LEADER:
            hint = self.leader_hint[m] if self.leader_hint[m] != m else None
            self.stats["redirects"] += 1
            self.mux.send(m, msg[-1], self.channel,
                          ("redirect", hint, msg[1], msg[2]))
            return
        if kind == "acq":
            _, cid, rid, res, node = msg
            cur = self.holders[m].get(res)
            if cur is not None and cur[0] == cid and cur[1] == rid:
                self.mux.send(m, node, self.channel,
                              ("grant", cid, rid, res, cur[2]))
                return
            self._propose(now, m, ("acq", cid, rid, res, node))
        elif kind == "rel":
            _, cid, rid, res, token, node = msg
            cur = self.holders[m].get(res)
            if not (cur is not None and cur[0] == cid and cur[1] == rid):
                # Already released, superseded, or force-released: done.
                self.mux.send(m, node, self.channel, ("rel_ack", cid, rid))
                return
            self._rel_waiters[(cid, rid)] = node
            self._propose(now, m, ("rel", cid, rid, res, token))
        elif kind == "ping":
            _, cid, rid, res, node = msg
            cur = self.holders[m].get(res)
            if cur is not None and cur[0] == cid and cur[1] == rid:
                self.last_ping[res] = now

    # ------------------------------------------------------------- messages

    def _make_on_message(self, node: int):
        def on_message(now: int, src: int, msg) -> None:
            kind = msg[0]
            if kind == "ae":
                self._handle_ae(now, node, msg)
            elif kind == "ae_ack":
                self._handle_ae_ack(now, node, msg)
            elif kind == "rv":
                self._handle_rv(now, node, msg)
            elif kind == "rv_ack":
                self._handle_rv_ack(now, node, msg)
            elif kind in ("acq", "rel", "ping"):
                self._member_client_msg(now, node, msg)
            elif kind == "grant":
                self._client_grant(now, node, msg)
            elif kind == "redirect":
                _, hint, cid, rid = msg
                if hint is not None:
                    self.client_hint[node] = hint
                    self._resubmit(node, cid, rid)
            elif kind == "rel_ack":
                _, cid, rid = msg
                if self.outstanding.pop((cid, rid), None) is not None:
                    self.release_sink(now, cid, rid)
        return on_message

    # ------------------------------------------------------------ client API

    def submit_acquire(self, node: int, client_id: int, request_id: int, resource: int) -> None:
        key = (client_id, request_id)
        pend = self.outstanding.get(key)
        if pend is not None and pend["kind"] == "acq":
            # Retry: prefer the current hint; if the hint is what was already
            # tried, rotate to the next member in case that one is dead.
            hinted = self.client_hint[node]
            if hinted != pend["target"]:
                target = hinted
            else:
                idx = (self.members.index(pend["target"]) + 1) % len(self.members)
                target = self.members[idx]
                self.client_hint[node] = target
        else:
            pend = {"resource": resource, "node": node, "kind": "acq"}
            self.outstanding[key] = pend
            target = self.client_hint[node]
        pend["target"] = target
        self.mux.send(node, target, self.channel,
                      ("acq", client_id, request_id, resource, node))

    def submit_release(self, node: int, client_id: int, request_id: int, resource: int, token: int) -> None:
        key = (client_id, request_id)
        self.held.pop(key, None)
        # The holder stops using the resource at submit time; record that as
        # the section's true end so later cleanup cannot misdate it.
        self.collector.release_received(resource, token, self.kernel.now)
        pend = self.outstanding.get(key)
        if pend is not None and pend["kind"] == "rel":
            hinted = self.client_hint[node]
            if hinted != pend["target"]:
                pend["target"] = hinted
            else:
                idx = (self.members.index(pend["target"]) + 1) % len(self.members)
                pend["target"] = self.members[idx]
                self.client_hint[node] = pend["target"]
        else:
            pend = {"resource": resource, "node": node, "kind": "rel",
                    "token": token, "target": self.client_hint[node]}
            self.outstanding[key] = pend
        self.mux.send(node, pend["target"], self.channel,
                      ("rel", client_id, request_id, resource, token, node))

    def _resubmit(self, node: int, cid: int, rid: int) -> None:
        pend = self.outstanding.get((cid, rid))
        if pend is None:
            return
        pend["target"] = self.client_hint[node]
        if pend["kind"] == "acq":
            self.mux.send(node, pend["target"], self.channel,
                          ("acq", cid, rid, pend["resource"], node))
        else:
            self.mux.send(node, pend["target"], self.channel,
                          ("rel", cid, rid, pend["resource"], pend["token"], node))

    def _client_grant(self, now: int, node: int, msg) -> None:
        _, cid, rid, res, token = msg
        key = (cid, rid)
        pend = self.outstanding.get(key)
        if pend is not None and pend["kind"] == "acq":
            del self.outstanding[key]
        if key not in self.held:
            self.held[key] = {"resource": res, "token": token, "node": node}
            self._arm_ping(node, cid, rid)
        self.grant_sink(now, cid, rid, res, token, None)

    def _arm_ping(self, node: int, cid: int, rid: int) -> None:
        interval = max(1, self.cfg.client_liveness_timeout_us // 3)
        self.mux.set_timer(node, interval, self.channel,
                           ("ping", cid, rid, self.kernel.crash_count[node]))

    def _client_ping(self, now: int, node: int, tag) -> None:
        _, cid, rid, epoch = tag
        if epoch != self.kernel.crash_count[node]:
            return
        info = self.held.get((cid, rid))
        if info is None:
            return
        self.mux.send(node, self.client_hint[node], self.channel,
                      ("ping", cid, rid, info["resource"], node))
        self._arm_ping(node, cid, rid)

    # ----------------------------------------------------------------- misc

    def validity_of(self, client_id: int, request_id: int):
        return None

    def timeout_hint(self, node: int, resource: int) -> int:
        worst = max(self.kernel.topology.rtt_us(node, m) for m in self.members)
        return self._timeout_from_rtt(worst) + 2 * self.cfg.flush_us

    def current_leader(self) -> Optional[int]:
        """The highest-term live leader, for tests and the replay harness."""
        best = None
        for m in self.members:
            if self.role[m] == LEADER and self.kernel.up[m]:
                term = self.kernel.durable(m)["term"]
                if best is None or term > best[0]:
                    best = (term, m)
        return best[1] if best else None
