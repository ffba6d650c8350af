"""Benchmark runner: sweeps QBER, combination mode, latency, and stages.

Runs dual-role in one process over the simulated link by default; with
--transport tcp each invocation drives one party over a real socket. Every
cell emits one CSV row, and the exit code is 0 only if all cells completed
without protocol-level errors.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, replace

from .bitframe import generate_bsc_pair, segment
from .cascade import Role
from .metrics import ReconStats, aggregate
from .params import (
    BlockSchedule,
    CombinationMode,
    build_schedule,
    original_cascade_schedule,
)
from .pipeline import (
    HandshakeError,
    PipelineConfig,
    PipelineRunner,
    handshake,
    handshake_summary,
    run_pair,
)
from .transport import ChannelConfig, SocketEndpoint, simulated_link

CSV_HEADER = (
    "qber,mode,latency_ms,stages,frames,f,f_fer,fer,rounds_mean,"
    "throughput_bps,m_star,collisions_avoided,searchlist_calls"
)

MODE_NAMES = {
    "he": CombinationMode.HIGH_EFFICIENCY,
    "me": CombinationMode.MEDIUM_EFFICIENCY,
    "mt": CombinationMode.MEDIUM_THROUGHPUT,
    "ht": CombinationMode.HIGH_THROUGHPUT,
}


@dataclass(frozen=True)
class ExperimentPlan:
    qber_list: tuple[float, ...] = (0.01,)
    mode_list: tuple[str, ...] = ("he",)
    latency_list_ms: tuple[float, ...] = (0.0,)
    stages_list: tuple[int, ...] = (4,)
    frames_per_cell: int = 20
    seed: int = 1
    transport: str = "sim"
    role: str = "both"
    qber_estimated: float | None = None
    jitter_ms: float = 0.0
    workers: int = 1
    collision_detection: bool = True
    listen: str | None = None
    connect: str | None = None

    def cells(self):
        i = 0
        for qber in self.qber_list:
            for mode in self.mode_list:
                for latency in self.latency_list_ms:
                    for stages in self.stages_list:
                        yield Cell(
                            qber=qber,
                            mode=mode,
                            latency_ms=latency,
                            stages=stages,
                            frames=self.frames_per_cell,
                            seed=self.seed + 7919 * i,
                            index=i,
                        )
                        i += 1


@dataclass(frozen=True)
class Cell:
    qber: float
    mode: str
    latency_ms: float
    stages: int
    frames: int
    seed: int
    index: int


@dataclass
class CellResult:
    cell: Cell
    stats: ReconStats | None
    error: str | None = None

    def row(self) -> str:
        c = self.cell
        if self.stats is None:
            metrics = ["nan"] * 5 + ["0", "0", "0"]
        else:
            s = self.stats
            metrics = [
                _fmt(s.f),
                _fmt(s.f_fer),
                _fmt(s.fer),
                _fmt(s.rounds_mean),
                _fmt(s.throughput_bps),
                str(s.m_star),
                str(s.collisions_avoided),
                str(s.searchlist_calls),
            ]
        return ",".join(
            [
                _fmt(c.qber),
                c.mode,
                _fmt(c.latency_ms),
                str(c.stages),
                str(c.frames),
            ]
            + metrics
        )


def _fmt(x: float) -> str:
    if isinstance(x, float) and (math.isnan(x) or math.isinf(x)):
        return "nan"
    return f"{x:.6g}"


def schedule_for(mode_name: str, eps: float) -> BlockSchedule:
    """Map a CLI mode name to a block schedule; 'orig' is the classic baseline."""
    if mode_name == "orig":
        return original_cascade_schedule(eps)
    try:
        return build_schedule(eps, mode=MODE_NAMES[mode_name])
    except KeyError as exc:
        raise ValueError(f"unknown mode {mode_name!r}") from exc


def baseline_mode(flag: str, plan: ExperimentPlan) -> ExperimentPlan:
    """Switch the plan into one of the A/B baseline variants."""
    if flag == "stop-wait":
        return replace(plan, stages_list=(1,))
    if flag == "collision-off":
        return replace(plan, collision_detection=False)
    if flag == "orig-schedule":
        return replace(plan, mode_list=("orig",))
    raise ValueError(f"unknown baseline {flag!r}")


def _split_frames(plan: ExperimentPlan, cell: Cell, n_bits: int):
    stream_a, stream_b = generate_bsc_pair(
        cell.frames * n_bits, cell.qber, cell.seed
    )
    frames_a, _ = segment(stream_a)
    frames_b, _ = segment(stream_b)
    return frames_a, frames_b


def run_cell(plan: ExperimentPlan, cell: Cell) -> CellResult:
    eps_est = plan.qber_estimated if plan.qber_estimated is not None else cell.qber
    schedule = schedule_for(cell.mode, eps_est)
    cfg = PipelineConfig(
        workers=plan.workers,
        stages_per_worker=cell.stages,
        collision_detection=plan.collision_detection,
    )
    try:
        if plan.transport == "sim" and plan.role == "both":
            frames_a, frames_b = _split_frames(plan, cell, schedule.n)
            link_cfg = ChannelConfig(
                one_way_latency_ms=cell.latency_ms,
                jitter_ms=plan.jitter_ms,
                seed=cell.seed,
            )
            _, records, wall = run_pair(
                frames_a, frames_b, schedule, cell.seed, lambda: simulated_link(link_cfg), cfg
            )
        elif plan.transport == "tcp":
            _, records, wall = _run_tcp_party(plan, cell, schedule, cfg)
        else:
            raise ValueError(
                f"unsupported transport/role combination {plan.transport}/{plan.role}"
            )
    except (HandshakeError, Exception) as exc:
        return CellResult(cell, None, error=f"{type(exc).__name__}: {exc}")
    stats = aggregate(records, cell.qber, wall)
    return CellResult(cell, stats)


def _run_tcp_party(plan: ExperimentPlan, cell: Cell, schedule, cfg):
    role = Role.REFERENCE if plan.role == "reference" else Role.CORRECTING
    frames_a, frames_b = _split_frames(plan, cell, schedule.n)
    frames = frames_a if role is Role.REFERENCE else frames_b
    if plan.listen:
        host, port = plan.listen.rsplit(":", 1)
        endpoint = SocketEndpoint.listen(host, int(port), timeout=60.0)
    elif plan.connect:
        host, port = plan.connect.rsplit(":", 1)
        endpoint = SocketEndpoint.connect(host, int(port))
    else:
        raise ValueError("tcp transport needs --listen or --connect")
    try:
        summary = handshake_summary(schedule, cell.seed, cfg, cell.frames)
        handshake(endpoint, role, summary)
        runner = PipelineRunner(role, frames, schedule, cell.seed, endpoint, cfg)
        return runner.run()
    finally:
        endpoint.close()


def run_plan(plan: ExperimentPlan, csv_path: str | None = None) -> list[CellResult]:
    results = []
    for cell in plan.cells():
        result = run_cell(plan, cell)
        results.append(result)
        if result.error:
            print(f"cell {cell.index} ({cell.qber:g}, {cell.mode}): ERROR {result.error}", file=sys.stderr)
        else:
            s = result.stats
            print(
                f"cell {cell.index}: qber={cell.qber:g} mode={cell.mode} "
                f"latency={cell.latency_ms:g}ms stages={cell.stages} "
                f"f={s.f:.4f} fer={s.fer:.3g} rounds={s.rounds_mean:.1f} "
                f"tput={s.throughput_bps / 1e6:.3f}Mbps"
            )
    if csv_path:
        emit_csv(results, csv_path)
    return results


def emit_csv(results: list[CellResult], path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(CSV_HEADER + "\n")
            for r in results:
                fh.write(r.row() + "\n")
    except OSError as exc:
        raise RuntimeError(f"cannot write CSV to {path}: {exc}") from exc


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cascade-recon-bench",
        description="Cascade reconciliation benchmark sweeps",
    )
    p.add_argument("--role", choices=["reference", "correcting", "both"], default="both")
    p.add_argument("--transport", choices=["sim", "tcp"], default="sim")
    p.add_argument("--listen", metavar="HOST:PORT")
    p.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--qber", type=_floats, default=(0.01,), metavar="F[,F...]")
    p.add_argument("--qber-estimated", type=float, default=None, metavar="F")
    p.add_argument("--mode", type=lambda s: tuple(s.split(",")), default=("he",), metavar="{he,me,mt,ht,orig}[,...]")
    p.add_argument("--latency-ms", type=_floats, default=(0.0,), metavar="F[,F...]")
    p.add_argument("--jitter-ms", type=float, default=0.0, metavar="F")
    p.add_argument("--stages", type=_ints, default=(4,), metavar="N[,N...]")
    p.add_argument("--workers", type=int, default=1, metavar="N")
    p.add_argument("--frames", type=int, default=20, metavar="N")
    p.add_argument("--seed", type=int, default=1, metavar="N")
    p.add_argument("--collision-detection", choices=["on", "off"], default="on")
    p.add_argument("--csv", metavar="PATH")
    return p


def plan_from_args(args: argparse.Namespace) -> ExperimentPlan:
    for m in args.mode:
        if m not in MODE_NAMES and m != "orig":
            raise SystemExit(f"unknown mode {m!r} (choose from he,me,mt,ht,orig)")
    return ExperimentPlan(
        qber_list=args.qber,
        mode_list=args.mode,
        latency_list_ms=args.latency_ms,
        stages_list=args.stages,
        frames_per_cell=args.frames,
        seed=args.seed,
        transport=args.transport,
        role=args.role,
        qber_estimated=args.qber_estimated,
        jitter_ms=args.jitter_ms,
        workers=args.workers,
        collision_detection=args.collision_detection == "on",
        listen=args.listen,
        connect=args.connect,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    plan = plan_from_args(args)
    results = run_plan(plan, args.csv)
    return 0 if all(r.error is None for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
