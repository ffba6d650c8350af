"""Sans-IO Cascade reconciliation engine.

Two FrameSession instances (one Reference, one Correcting) advance in
lockstep through message batches. The Correcting side drives: it announces
block parities, descends binary searches, flips bits and schedules
backtracking. The Reference side answers with comparison bits and mirrors
the Correcting side's bookkeeping, so wire payloads carry only parity and
comparison bits; both sides always agree on which blocks are in flight.

A session never performs I/O: step() consumes a batch of incoming messages
and returns the batch to send back.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .bitframe import FRAME_BITS, BitVector, Frame, PermutationTable, build_permutation
from .params import BlockSchedule
from .paritytree import ComparisonForest, ParityForest


class Role(enum.Enum):
    REFERENCE = "reference"
    CORRECTING = "correcting"


class MsgKind(enum.IntEnum):
    BLOCK_PARITIES = 0
    PARITY_REPLIES = 1
    BINARY_QUERIES = 2
    BINARY_REPLIES = 3
    VERIFY_CHALLENGE = 4
    VERIFY_REPLY = 5
    FRAME_DONE = 6
    HANDSHAKE = 7


class Status(enum.Enum):
    RUNNING = "running"
    AWAITING_REPLIES = "awaiting-replies"
    VERIFIED = "verified"
    FAILED = "failed"


@dataclass(frozen=True)
class ProtocolMessage:
    frame_id: int
    kind: MsgKind
    pass_index: int
    payload: bytes
    bit_count: int


# Work-selection decisions.
@dataclass(frozen=True)
class StartSearches:
    pass_index: int
    blocks: tuple[int, ...]


class AdvancePass:
    pass


class BeginVerify:
    pass


def _pack(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def _unpack(payload: bytes, count: int) -> np.ndarray:
    return np.unpackbits(
        np.frombuffer(payload, dtype=np.uint8), count=count, bitorder="little"
    )


def shared_permutations(
    session_seed: int, n: int, num_passes: int
) -> dict[int, PermutationTable | None]:
    """Per-pass shuffle tables reused by every frame; pass 1 is identity."""
    perms: dict[int, PermutationTable | None] = {1: None}
    for p in range(2, num_passes + 1):
        perms[p] = build_permutation(session_seed + p, n)
    return perms


def frame_digest(bits: BitVector, salt: int) -> int:
    """Salted 64-bit digest used by the verification exchange."""
    h = hashlib.blake2b(
        bits.to_bytes(), digest_size=8, salt=int(salt).to_bytes(8, "little")
    )
    return int.from_bytes(h.digest(), "little")


class ProtocolError(Exception):
    pass


class FrameSession:
    """Per-frame protocol state machine for one party."""

    def __init__(
        self,
        frame: Frame,
        role: Role,
        schedule: BlockSchedule,
        session_seed: int,
        permutations: dict[int, PermutationTable | None] | None = None,
        collision_detection: bool = True,
        max_rounds: int | None = None,
        allow_small: bool = False,
    ):
        if frame.n != schedule.n:
            raise ValueError(
                f"frame length {frame.n} does not match schedule length {schedule.n}"
            )
        if schedule.n != FRAME_BITS and not allow_small:
            raise ValueError(
                "protocol frames are 65536 bits; pass allow_small=True for test scales"
            )
        self.frame = frame
        self.role = role
        self.schedule = schedule
        self.session_seed = session_seed
        self.collision_detection = collision_detection
        n = schedule.n
        # Safety valve against runaway sessions; convergence normally takes
        # a few hundred request rounds per frame at percent-level QBER.
        self.max_rounds = (
            max_rounds if max_rounds is not None else 128 * (n.bit_length() - 1)
        )
        self.permutations = (
            permutations
            if permutations is not None
            else shared_permutations(session_seed, n, schedule.num_passes)
        )

        self.pass_index = 0
        self.parity_forests: dict[int, ParityForest] = {}
        self.comparison_forests: dict[int, ComparisonForest] = {}
        self.backtrack_lists: dict[int, list[int]] = {
            p: [] for p in range(1, schedule.num_passes + 1)
        }
        self.cursor_pass: int | None = None
        self.cursor_blocks: np.ndarray | None = None
        self.cursor_nodes: np.ndarray | None = None

        self.status = Status.RUNNING
        self.failure_reason: str | None = None
        self.round_counter = 0
        self.leaked_bits_one_direction = 0
        self.collisions_avoided = 0
        self.searchlist_calls = 0
        self.corrections = 0

        self._started = False
        self._expected: MsgKind | None = (
            None if role is Role.CORRECTING else MsgKind.BLOCK_PARITIES
        )
        self._verify_salt: int | None = None

    # -- convenience ---------------------------------------------------

    @property
    def m_star(self) -> int:
        return self.leaked_bits_one_direction

    def done(self) -> bool:
        return self.status in (Status.VERIFIED, Status.FAILED)

    def _k(self, p: int) -> int:
        return self.schedule.k[p - 1]

    def _to_pass_coords(self, p: int, positions: np.ndarray) -> np.ndarray:
        table = self.permutations[p]
        return positions if table is None else table.forward[positions]

    def _to_frame_coords(self, p: int, leaves: np.ndarray) -> np.ndarray:
        table = self.permutations[p]
        return leaves if table is None else table.inverse[leaves]

    # -- pass management -----------------------------------------------

    def start_pass(self) -> None:
        """Shuffle, partition, and build this pass's parity tree."""
        if self.cursor_pass is not None:
            raise ProtocolError("cannot start a pass with searches pending")
        self.pass_index += 1
        p = self.pass_index
        k = self._k(p)
        table = self.permutations[p]
        bits = self.frame.bits.unpack()
        leaves = bits if table is None else bits[table.inverse]
        self.parity_forests[p] = ParityForest.build(leaves, k)
        if p <= 2:
            self.comparison_forests[p] = ComparisonForest.create(
                self.schedule.n // k, k
            )

    def _emit_block_parities(self) -> ProtocolMessage:
        p = self.pass_index
        parities = self.parity_forests[p].root_parities()
        self.round_counter += 1
        self._expected = MsgKind.PARITY_REPLIES
        self.status = Status.AWAITING_REPLIES
        return ProtocolMessage(
            self.frame.frame_id, MsgKind.BLOCK_PARITIES, p, _pack(parities), parities.size
        )

    def _record_pass_comparisons(self, mismatches: np.ndarray) -> int:
        """Store root comparison results and enqueue mismatched blocks."""
        p = self.pass_index
        forest = self.parity_forests[p]
        blocks = np.arange(forest.num_blocks, dtype=np.int64)
        forest.set_root_comparisons(blocks, mismatches)
        if p <= 2:
            # Matched roots are resolved; mismatched keep their init mark.
            self.comparison_forests[p].set_nodes(blocks, 1, mismatches)
        bad = np.nonzero(mismatches)[0].astype(np.int64)
        if bad.size:
            self._enqueue_wave(p, bad)
        return int(bad.size)

    def compare_and_enqueue(self, replies: ProtocolMessage) -> int:
        """Correcting side: absorb root comparison results for this pass."""
        p = self.pass_index
        nb = self.parity_forests[p].num_blocks
        if replies.kind is not MsgKind.PARITY_REPLIES or replies.bit_count != nb:
            raise ProtocolError("parity reply does not match the current pass")
        self.leaked_bits_one_direction += nb
        return self._record_pass_comparisons(_unpack(replies.payload, nb))

    # -- binary search -------------------------------------------------

    def _enqueue_wave(self, p: int, blocks: np.ndarray) -> None:
        self.cursor_pass = p
        self.cursor_blocks = blocks
        self.cursor_nodes = np.ones(blocks.size, dtype=np.int64)
        self._free_descend()

    def _free_descend(self) -> None:
        """Descend cursors through sub-blocks the comparison tree has already
        resolved, costing no wire bits.

        An internal node marked 0 is guaranteed to hold an even number of
        pending errors, so when exactly one child of a mismatching node is
        marked 0 the search can step into the other child without a query.
        Leaf marks start at 0 without meaning "resolved", so the last level
        is always settled by a wire query. Both parties maintain identical
        marks and therefore skip the same levels.
        """
        p = self.cursor_pass
        if p > 2:
            return
        k = self._k(p)
        cf = self.comparison_forests[p]
        nodes = self.cursor_nodes
        blocks = self.cursor_blocks
        while True:
            # Step only where both children are internal nodes.
            active = 2 * nodes < k
            if not active.any():
                return
            v = nodes[active]
            b = blocks[active]
            left = cf.node_bits(b, 2 * v)
            right = cf.node_bits(b, 2 * v + 1)
            step_left = (left == 1) & (right == 0)
            step_right = (right == 1) & (left == 0)
            if not (step_left.any() or step_right.any()):
                return
            moved = np.where(step_left, 2 * v, np.where(step_right, 2 * v + 1, v))
            nodes[active] = moved

    def _querying(self) -> np.ndarray:
        """Cursors still descending; the rest wait at leaves for the wave."""
        return self.cursor_nodes < self._k(self.cursor_pass)

    def binary_search_round(self) -> ProtocolMessage:
        """Emit the parity of the left half of every descending cursor."""
        if self.cursor_pass is None:
            raise ProtocolError("no active searches")
        p = self.cursor_pass
        mask = self._querying()
        left = 2 * self.cursor_nodes[mask]
        bits = self.parity_forests[p].node_bits(self.cursor_blocks[mask], left)
        self.round_counter += 1
        self._expected = MsgKind.BINARY_REPLIES
        self.status = Status.AWAITING_REPLIES
        return ProtocolMessage(
            self.frame.frame_id, MsgKind.BINARY_QUERIES, p, _pack(bits), bits.size
        )

    def _advance_cursors(self, outcomes: np.ndarray) -> np.ndarray | None:
        """Descend the querying cursors one level; returns corrected frame
        positions when the whole wave has retired, else None.

        Corrections are deferred until every cursor in the wave reaches a
        leaf, so searches never race the bit flips they trigger.
        """
        p = self.cursor_pass
        k = self._k(p)
        mask = self._querying()
        nodes = self.cursor_nodes[mask]
        chosen = np.where(outcomes == 1, 2 * nodes, 2 * nodes + 1)
        if p <= 2:
            cf = self.comparison_forests[p]
            blocks = self.cursor_blocks[mask]
            cf.set_nodes(blocks, 2 * nodes, outcomes)
            cf.set_nodes(blocks, 2 * nodes + 1, 1 - outcomes)
        self.cursor_nodes[mask] = chosen
        self._free_descend()
        if (self.cursor_nodes >= k).all():
            return self._retire_wave()
        return None

    def _retire_wave(self) -> np.ndarray:
        """All cursors reached leaves: apply corrections and backtrack."""
        p = self.cursor_pass
        k = self._k(p)
        leaves = self.cursor_blocks * k + (self.cursor_nodes - k)
        if p <= 2:
            # Every node on a corrected path now has an even pending count.
            self.comparison_forests[p].set_paths(leaves, 0)
        positions = self._to_frame_coords(p, leaves)
        if self.role is Role.CORRECTING:
            self.frame.bits.flip_many(positions)
            for q in range(1, self.pass_index + 1):
                self.parity_forests[q].flip_leaf_paths(
                    self._to_pass_coords(q, positions)
                )
        self.corrections += positions.size
        self.cascade_backtrack(positions)
        self.cursor_pass = None
        self.cursor_blocks = None
        self.cursor_nodes = None
        return positions

    def absorb_binary_replies(self, msg: ProtocolMessage) -> np.ndarray | None:
        """Correcting side: consume comparison bits for the current wave."""
        if self.cursor_pass is None or msg.bit_count != int(self._querying().sum()):
            raise ProtocolError("binary replies do not match active searches")
        self.leaked_bits_one_direction += msg.bit_count
        return self._advance_cursors(_unpack(msg.payload, msg.bit_count))

    # -- backtracking ----------------------------------------------------

    def cascade_backtrack(self, positions: np.ndarray) -> None:
        """Revisit every other pass's block containing a corrected bit.

        Root comparison results toggle in every started pass (a correction
        flips the local parity of each containing block). Backtrack-list
        membership toggles everywhere except the pass that produced the
        corrections; the lock bit short-circuits the list scan on first
        touch in passes 1-2 when collision detection is on.
        """
        wave = self.cursor_pass
        for p in range(1, self.pass_index + 1):
            k = self._k(p)
            leaves = self._to_pass_coords(p, positions)
            blocks = leaves // k
            self.parity_forests[p].toggle_root_comparisons(blocks)
            if p == wave:
                continue
            if p <= 2:
                # Re-open the corrected paths: their comparison state is stale.
                self.comparison_forests[p].set_paths(leaves, 1)
            lst = self.backtrack_lists[p]
            if p <= 2 and self.collision_detection:
                cf = self.comparison_forests[p]
                for b in blocks.tolist():
                    if cf.lock_bit(b):
                        self.searchlist_calls += 1
                        self._searchlist_toggle(lst, b)
                    else:
                        cf.set_lock(b)
                        lst.append(b)
                        self.collisions_avoided += 1
            else:
                for b in blocks.tolist():
                    self.searchlist_calls += 1
                    self._searchlist_toggle(lst, b)

    @staticmethod
    def _searchlist_toggle(lst: list[int], block: int) -> None:
        try:
            lst.remove(block)
        except ValueError:
            lst.append(block)

    # -- work selection --------------------------------------------------

    def select_next_work(self):
        """Drain the smallest-block pass first, then advance or verify."""
        pending = [
            (self._k(p), p)
            for p, lst in self.backtrack_lists.items()
            if lst
        ]
        if pending:
            _, p = min(pending)
            return StartSearches(p, tuple(sorted(self.backtrack_lists[p])))
        if self.pass_index < self.schedule.num_passes:
            return AdvancePass()
        return BeginVerify()

    def _drain(self, decision: StartSearches) -> None:
        p = decision.pass_index
        self.backtrack_lists[p].clear()
        blocks = np.array(decision.blocks, dtype=np.int64)
        if p <= 2 and self.collision_detection:
            cf = self.comparison_forests[p]
            for b in decision.blocks:
                cf.clear_lock(b)
        self._enqueue_wave(p, blocks)

    def _continue_or_next(self) -> list[ProtocolMessage]:
        """Run the work-selection loop until a request is due (or verify)."""
        while True:
            if self.cursor_pass is not None:
                if (self.cursor_nodes >= self._k(self.cursor_pass)).all():
                    # Whole wave resolved without further queries.
                    self._retire_wave()
                    continue
                if self.role is Role.CORRECTING:
                    return [self.binary_search_round()]
                self._expected = MsgKind.BINARY_QUERIES
                self.status = Status.AWAITING_REPLIES
                return []
            decision = self.select_next_work()
            if isinstance(decision, StartSearches):
                self._drain(decision)
                continue
            if isinstance(decision, AdvancePass):
                if self.role is Role.CORRECTING:
                    self.start_pass()
                    return [self._emit_block_parities()]
                self._expected = MsgKind.BLOCK_PARITIES
                self.status = Status.AWAITING_REPLIES
                return []
            # BeginVerify
            if self.role is Role.CORRECTING:
                return [self._emit_verify_challenge()]
            self._expected = MsgKind.VERIFY_CHALLENGE
            self.status = Status.AWAITING_REPLIES
            return []

    # -- verification ------------------------------------------------------

    def _emit_verify_challenge(self) -> ProtocolMessage:
        rng = np.random.default_rng((self.session_seed, self.frame.frame_id))
        self._verify_salt = int(rng.integers(0, 1 << 63, dtype=np.int64))
        digest = frame_digest(self.frame.bits, self._verify_salt)
        payload = self._verify_salt.to_bytes(8, "little") + digest.to_bytes(8, "little")
        self.round_counter += 1
        self._expected = MsgKind.VERIFY_REPLY
        self.status = Status.AWAITING_REPLIES
        return ProtocolMessage(
            self.frame.frame_id, MsgKind.VERIFY_CHALLENGE, 0, payload, 128
        )

    def verify_frame(self, peer_digest: int) -> Status:
        """Compare the peer's salted digest with our own and settle status."""
        own = frame_digest(self.frame.bits, self._verify_salt)
        self.status = Status.VERIFIED if own == peer_digest else Status.FAILED
        if self.status is Status.FAILED:
            self.failure_reason = "verification digest mismatch"
        return self.status

    # -- message handling ----------------------------------------------------

    def _fail(self, reason: str) -> list[ProtocolMessage]:
        self.status = Status.FAILED
        self.failure_reason = reason
        return [
            ProtocolMessage(self.frame.frame_id, MsgKind.FRAME_DONE, 0, b"\x00", 1)
        ]

    def step(self, incoming: list[ProtocolMessage]) -> tuple[list[ProtocolMessage], Status]:
        """Advance one communication round; pure message-in/message-out."""
        if self.done():
            return [], self.status
        if self.round_counter > self.max_rounds:
            return self._fail("round cap exceeded"), self.status
        if not incoming:
            if self.role is Role.CORRECTING and not self._started:
                self._started = True
                self.start_pass()
                return [self._emit_block_parities()], self.status
            return [], self.status
        out: list[ProtocolMessage] = []
        for msg in incoming:
            if self.done():
                break
            out.extend(self._handle(msg))
        return out, self.status

    def _handle(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        if msg.frame_id != self.frame.frame_id:
            return self._fail(f"message for foreign frame {msg.frame_id}")
        if msg.kind is MsgKind.FRAME_DONE:
            return self._on_frame_done(msg)
        if self._expected is None or msg.kind is not self._expected:
            return self._fail(
                f"unexpected {msg.kind.name}, wanted "
                f"{self._expected.name if self._expected else 'nothing'}"
            )
        self.status = Status.RUNNING
        try:
            if msg.kind is MsgKind.BLOCK_PARITIES:
                return self._on_block_parities(msg)
            if msg.kind is MsgKind.PARITY_REPLIES:
                self.compare_and_enqueue(msg)
                return self._continue_or_next()
            if msg.kind is MsgKind.BINARY_QUERIES:
                return self._on_binary_queries(msg)
            if msg.kind is MsgKind.BINARY_REPLIES:
                self.absorb_binary_replies(msg)
                return self._continue_or_next()
            if msg.kind is MsgKind.VERIFY_CHALLENGE:
                return self._on_verify_challenge(msg)
            if msg.kind is MsgKind.VERIFY_REPLY:
                return self._on_verify_reply(msg)
        except ProtocolError as exc:
            return self._fail(str(exc))
        return self._fail(f"unhandled message kind {msg.kind.name}")

    # Reference-side handlers.

    def _on_block_parities(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        if msg.pass_index != self.pass_index + 1:
            raise ProtocolError("pass index out of sequence")
        self.start_pass()
        forest = self.parity_forests[self.pass_index]
        nb = forest.num_blocks
        if msg.bit_count != nb:
            raise ProtocolError("block parity count mismatch")
        mismatches = forest.root_parities() ^ _unpack(msg.payload, nb)
        self.leaked_bits_one_direction += nb
        self.round_counter += 1
        reply = ProtocolMessage(
            self.frame.frame_id,
            MsgKind.PARITY_REPLIES,
            self.pass_index,
            _pack(mismatches),
            nb,
        )
        self._record_pass_comparisons(mismatches)
        return [reply] + self._continue_or_next()

    def _on_binary_queries(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        if self.cursor_pass is None or msg.bit_count != int(self._querying().sum()):
            raise ProtocolError("binary queries do not match mirrored searches")
        mask = self._querying()
        left = 2 * self.cursor_nodes[mask]
        mine = self.parity_forests[self.cursor_pass].node_bits(
            self.cursor_blocks[mask], left
        )
        outcomes = mine ^ _unpack(msg.payload, msg.bit_count)
        self.leaked_bits_one_direction += msg.bit_count
        self.round_counter += 1
        reply = ProtocolMessage(
            self.frame.frame_id,
            MsgKind.BINARY_REPLIES,
            self.cursor_pass,
            _pack(outcomes),
            outcomes.size,
        )
        self._advance_cursors(outcomes)
        return [reply] + self._continue_or_next()

    def _on_verify_challenge(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        if msg.bit_count != 128:
            raise ProtocolError("malformed verify challenge")
        self._verify_salt = int.from_bytes(msg.payload[:8], "little")
        peer_digest = int.from_bytes(msg.payload[8:16], "little")
        own = frame_digest(self.frame.bits, self._verify_salt)
        reply = ProtocolMessage(
            self.frame.frame_id,
            MsgKind.VERIFY_REPLY,
            0,
            own.to_bytes(8, "little"),
            64,
        )
        self.verify_frame(peer_digest)
        self._expected = MsgKind.FRAME_DONE
        if not self.done():
            self.status = Status.AWAITING_REPLIES
        return [reply]

    def _on_verify_reply(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        if msg.bit_count != 64:
            raise ProtocolError("malformed verify reply")
        status = self.verify_frame(int.from_bytes(msg.payload[:8], "little"))
        flag = b"\x01" if status is Status.VERIFIED else b"\x00"
        return [
            ProtocolMessage(self.frame.frame_id, MsgKind.FRAME_DONE, 0, flag, 1)
        ]

    def _on_frame_done(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        peer_ok = bool(msg.payload[0] & 1)
        if self.status is Status.VERIFIED and peer_ok:
            return []
        if not self.done():
            # Peer aborted, or finished while we were mid-protocol.
            self.status = Status.VERIFIED if peer_ok else Status.FAILED
            if not peer_ok:
                self.failure_reason = "peer reported failure"
        elif self.done() and peer_ok != (self.status is Status.VERIFIED):
            self.status = Status.FAILED
            self.failure_reason = "verification outcome disagreement"
        return []


def lockstep_reconcile(
    reference: FrameSession,
    correcting: FrameSession,
    tap=None,
) -> tuple[Status, Status]:
    """Drive a session pair to completion without a transport.

    Messages pass directly between the two sessions. An optional tap
    callable receives (sender_role, message) for every delivery, which the
    tests use for independent leak accounting.
    """
    to_ref, _ = correcting.step([])
    while True:
        if tap:
            for m in to_ref:
                tap(Role.CORRECTING, m)
        to_cor, _ = reference.step(to_ref)
        if tap:
            for m in to_cor:
                tap(Role.REFERENCE, m)
        if correcting.done() and reference.done():
            break
        to_ref, _ = correcting.step(to_cor)
        if correcting.done() and reference.done() and not to_ref:
            break
        if not to_ref and not to_cor:
            break
    return reference.status, correcting.status
