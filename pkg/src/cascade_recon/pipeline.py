"""Multi-pipeline scheduler: interleaved frame sessions hide link latency.

Each worker thread owns a fixed set of stage slots. A slot holds one live
FrameSession; when that session is waiting for the peer's reply the worker
advances its other slots instead of blocking, so several frames' round
trips overlap. Messages from all sessions funnel through one shared
batcher onto the channel; a dispatcher thread routes incoming submessages
back to the owning worker.
"""

from __future__ import annotations

import json
import os
import sys
import threading
import time
from dataclasses import dataclass, field

from .bitframe import Frame
from .cascade import FrameSession, MsgKind, ProtocolMessage, Role, Status, shared_permutations
from .metrics import FrameRecord
from .params import BlockSchedule
from .transport import ChannelClosed, Packet, batch

HANDSHAKE_FRAME_ID = 0xFFFFFFFF


class HandshakeError(Exception):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    workers: int = 0  # 0 means one per CPU core
    stages_per_worker: int = 4
    input_buffer_bits: int = 10 * (1 << 20)
    stop_after_bits: int | None = 1 << 30
    collision_detection: bool = True
    max_rounds: int | None = None

    def resolved_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def __post_init__(self):
        if self.stages_per_worker < 1:
            raise ValueError("stages_per_worker must be >= 1")


@dataclass
class WorkerStats:
    busy_s: float = 0.0
    wait_s: float = 0.0
    frames_served: int = 0


@dataclass
class SchedulerStats:
    workers: list[WorkerStats] = field(default_factory=list)
    rounds_issued: int = 0
    frames_completed: int = 0
    frames_failed: int = 0


def handshake_summary(
    schedule: BlockSchedule,
    session_seed: int,
    cfg: PipelineConfig,
    n_frames: int,
) -> dict:
    return {
        "n": schedule.n,
        "epsilon": schedule.epsilon,
        "mode": schedule.mode.value if schedule.mode else "custom",
        "k": list(schedule.k),
        "session_seed": session_seed,
        "stages": cfg.stages_per_worker,
        "frames": n_frames,
        "collision_detection": cfg.collision_detection,
    }


def _handshake_message(summary: dict) -> ProtocolMessage:
    payload = json.dumps(summary, sort_keys=True).encode()
    return ProtocolMessage(
        HANDSHAKE_FRAME_ID, MsgKind.HANDSHAKE, 0, payload, len(payload) * 8
    )


def _check_summaries(mine: dict, theirs: dict) -> None:
    bad = [k for k in sorted(set(mine) | set(theirs)) if mine.get(k) != theirs.get(k)]
    if bad:
        detail = ", ".join(
            f"{k}: local={mine.get(k)!r} peer={theirs.get(k)!r}" for k in bad
        )
        raise HandshakeError(f"parameter mismatch on {detail}")


def handshake(endpoint, role: Role, summary: dict, timeout: float = 30.0) -> dict:
    """Exchange and verify run parameters; correcting side speaks first."""
    session_id = summary["session_seed"] & 0xFFFFFFFFFFFFFFFF
    if role is Role.CORRECTING:
        endpoint.send(Packet(session_id, 0, (_handshake_message(summary),)))
        packet = endpoint.recv(timeout)
    else:
        packet = endpoint.recv(timeout)
    if packet is None:
        raise HandshakeError("handshake timed out")
    if (
        len(packet.submessages) != 1
        or packet.submessages[0].kind is not MsgKind.HANDSHAKE
    ):
        raise HandshakeError("peer did not open with a handshake")
    theirs = json.loads(packet.submessages[0].payload.decode())
    if role is Role.REFERENCE:
        endpoint.send(Packet(session_id, 0, (_handshake_message(summary),)))
    _check_summaries(summary, theirs)
    return theirs


class _Batcher:
    """Thread-safe collection point; one uniform packet per submission."""

    def __init__(self, endpoint, session_id: int):
        self.endpoint = endpoint
        self.session_id = session_id
        self.lock = threading.Lock()
        self.round_no = 0

    def submit(self, msgs: list[ProtocolMessage]) -> None:
        if not msgs:
            return
        with self.lock:
            self.round_no += 1
            packets = batch(self.session_id, self.round_no, msgs)
        for p in packets:
            self.endpoint.send(p)


class _Worker:
    def __init__(self, runner: "PipelineRunner", index: int):
        self.runner = runner
        self.index = index
        self.inbox: dict[int, list[ProtocolMessage]] = {}
        self.lock = threading.Lock()
        self.wakeup = threading.Condition(self.lock)
        self.pending_frames: list[Frame] = []
        self.slots: list[FrameSession | None] = [None] * runner.cfg.stages_per_worker
        self.stats = WorkerStats()
        self.aborted = False
        self.consumed_bits = 0
        self.thread = threading.Thread(
            target=self._run, name=f"recon-worker-{index}", daemon=True
        )

    def deliver(self, msgs: list[ProtocolMessage]) -> None:
        with self.lock:
            for m in msgs:
                self.inbox.setdefault(m.frame_id, []).append(m)
            self.wakeup.notify()

    def abort(self) -> None:
        with self.lock:
            self.aborted = True
            self.wakeup.notify()

    def _refill(self, slot: int) -> bool:
        cfg = self.runner.cfg
        if not self.pending_frames:
            return False
        if cfg.stop_after_bits is not None and self.consumed_bits >= cfg.stop_after_bits:
            return False
        frame = self.pending_frames.pop(0)
        self.consumed_bits += frame.n
        session = self.runner.make_session(frame)
        self.slots[slot] = session
        return True

    def _run(self) -> None:
        runner = self.runner
        while True:
            progressed = False
            outgoing: list[ProtocolMessage] = []
            t0 = time.perf_counter()
            for i, session in enumerate(self.slots):
                fresh = False
                if session is None:
                    if self._refill(i):
                        session = self.slots[i]
                        progressed = True
                        fresh = True
                    else:
                        continue
                with self.lock:
                    incoming = self.inbox.pop(session.frame.frame_id, [])
                if self.aborted and not session.done():
                    session.status = Status.FAILED
                    session.failure_reason = "channel aborted"
                elif not incoming and not fresh:
                    # Awaiting the peer; nothing to advance.
                    continue
                out, _ = session.step(incoming)
                if incoming or out:
                    progressed = True
                outgoing.extend(out)
                if session.done():
                    runner.finish_session(session)
                    self.stats.frames_served += 1
                    self.slots[i] = None
                    progressed = True
            self.stats.busy_s += time.perf_counter() - t0
            if outgoing:
                runner.batcher.submit(outgoing)
            if self._idle():
                return
            if not progressed:
                t1 = time.perf_counter()
                with self.lock:
                    if not self.inbox and not self.aborted:
                        self.wakeup.wait(0.2)
                self.stats.wait_s += time.perf_counter() - t1

    def _idle(self) -> bool:
        cfg = self.runner.cfg
        exhausted = (
            not self.pending_frames
            or self.aborted
            or (
                cfg.stop_after_bits is not None
                and self.consumed_bits >= cfg.stop_after_bits
            )
        )
        return all(s is None for s in self.slots) and exhausted


class PipelineRunner:
    """Drives one party's side of a run over a packet channel."""

    def __init__(
        self,
        role: Role,
        frames: list[Frame],
        schedule: BlockSchedule,
        session_seed: int,
        endpoint,
        cfg: PipelineConfig | None = None,
        allow_small: bool = False,
    ):
        self.role = role
        self.frames = frames
        self.schedule = schedule
        self.session_seed = session_seed
        self.endpoint = endpoint
        self.cfg = cfg or PipelineConfig()
        self.allow_small = allow_small
        self.permutations = shared_permutations(
            session_seed, schedule.n, schedule.num_passes
        )
        self.batcher = _Batcher(endpoint, session_seed & 0xFFFFFFFFFFFFFFFF)
        n_workers = self.cfg.resolved_workers()
        self.workers = [_Worker(self, i) for i in range(n_workers)]
        self.frame_owner: dict[int, _Worker] = {}
        capacity = max(1, self.cfg.input_buffer_bits // schedule.n)
        for i, frame in enumerate(frames):
            worker = self.workers[i % n_workers]
            if len(worker.pending_frames) >= capacity:
                worker = min(self.workers, key=lambda w: len(w.pending_frames))
            worker.pending_frames.append(frame)
            self.frame_owner[frame.frame_id] = worker
        self.records: list[FrameRecord] = []
        self.sessions_done = 0
        self.done_lock = threading.Lock()
        self.all_done = threading.Event()
        self.error: Exception | None = None

    def make_session(self, frame: Frame) -> FrameSession:
        return FrameSession(
            frame,
            self.role,
            self.schedule,
            self.session_seed,
            permutations=self.permutations,
            collision_detection=self.cfg.collision_detection,
            max_rounds=self.cfg.max_rounds,
            allow_small=self.allow_small,
        )

    def finish_session(self, session: FrameSession) -> None:
        record = FrameRecord(
            frame_id=session.frame.frame_id,
            verified=session.status is Status.VERIFIED,
            n=session.frame.n,
            m_star=session.m_star,
            rounds=session.round_counter,
            collisions_avoided=session.collisions_avoided,
            searchlist_calls=session.searchlist_calls,
        )
        with self.done_lock:
            self.records.append(record)
            self.sessions_done += 1
            if self.sessions_done == len(self.frames):
                self.all_done.set()

    def _dispatch(self) -> None:
        try:
            while not self.all_done.is_set():
                packet = self.endpoint.recv(timeout=0.2)
                if packet is None:
                    continue
                routes: dict[_Worker, list[ProtocolMessage]] = {}
                for msg in packet.submessages:
                    owner = self.frame_owner.get(msg.frame_id)
                    if owner is not None:
                        routes.setdefault(owner, []).append(msg)
                for worker, msgs in routes.items():
                    worker.deliver(msgs)
        except ChannelClosed:
            if not self.all_done.is_set():
                self.error = ChannelClosed("link lost mid-run")
                for w in self.workers:
                    w.abort()
        except Exception as exc:  # decode errors abort the run
            self.error = exc
            for w in self.workers:
                w.abort()

    def run(self) -> tuple[SchedulerStats, list[FrameRecord], float]:
        dispatcher = threading.Thread(
            target=self._dispatch, name="recon-dispatch", daemon=True
        )
        # Round trips are pure thread handoffs; the default 5 ms GIL switch
        # interval would dwarf the modelled link latency.
        old_interval = sys.getswitchinterval()
        sys.setswitchinterval(0.0002)
        t0 = time.perf_counter()
        try:
            dispatcher.start()
            for w in self.workers:
                w.thread.start()
            for w in self.workers:
                w.thread.join()
            self.all_done.set()
            dispatcher.join()
        finally:
            sys.setswitchinterval(old_interval)
        wall = time.perf_counter() - t0
        if self.error is not None and self.sessions_done < len(self.frames):
            raise self.error
        stats = SchedulerStats(
            workers=[w.stats for w in self.workers],
            rounds_issued=self.batcher.round_no,
            frames_completed=sum(1 for r in self.records if r.verified),
            frames_failed=sum(1 for r in self.records if not r.verified),
        )
        return stats, sorted(self.records, key=lambda r: r.frame_id), wall


def run_pair(
    ref_frames: list[Frame],
    cor_frames: list[Frame],
    schedule: BlockSchedule,
    session_seed: int,
    link_factory,
    cfg: PipelineConfig | None = None,
    allow_small: bool = False,
    do_handshake: bool = True,
) -> tuple[SchedulerStats, list[FrameRecord], float]:
    """Run both parties in-process over a simulated link.

    link_factory() must return a (reference_endpoint, correcting_endpoint)
    pair. Returns the correcting side's stats, records, and wall time.
    """
    cfg = cfg or PipelineConfig()
    ep_ref, ep_cor = link_factory()
    summary_r = handshake_summary(schedule, session_seed, cfg, len(ref_frames))
    summary_c = handshake_summary(schedule, session_seed, cfg, len(cor_frames))
    results: dict[str, tuple] = {}
    errors: list[Exception] = []

    def side(role, frames, endpoint, summary):
        try:
            if do_handshake:
                handshake(endpoint, role, summary)
            runner = PipelineRunner(
                role, frames, schedule, session_seed, endpoint, cfg, allow_small
            )
            results[role.value] = runner.run()
        except Exception as exc:
            errors.append(exc)
            endpoint.close()

    t_ref = threading.Thread(
        target=side, args=(Role.REFERENCE, ref_frames, ep_ref, summary_r), daemon=True
    )
    t_cor = threading.Thread(
        target=side, args=(Role.CORRECTING, cor_frames, ep_cor, summary_c), daemon=True
    )
    t_ref.start()
    t_cor.start()
    t_cor.join()
    t_ref.join()
    if errors:
        raise errors[0]
    return results[Role.CORRECTING.value]
