"""Scenario execution: server plus simulated clients over scripted links, and the run report.

Deterministic mode steps every camera frame in global timestamp order on one
thread.  After each frame the network is drained until every endpoint is
settled and the global worker runs one tick, so lossy and lossless runs
apply identical message sequences.  Threaded mode gives each client its own
thread and runs the global worker concurrently.
"""

from __future__ import annotations

import csv
import heapq
import json
import logging
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import protocol as P
from .client import Client, ClientConfig
from .errors import ConfigError, DegenerateConfiguration, TooFewAssociations, TooFewPoints
from .geom import Pose, compose, inverse
from .metrics import BandwidthMeter, Timings, compute_ate
from .netio import FrameListener, OptimizerWorker, SocketClientLink
from .scenario import Scenario
from .server import RigidPair, Server, ServerConfig
from .simworld import (
    DEPTH_INTRINSICS,
    FRONT_MOUNT,
    MONO_INTRINSICS,
    REAR_MOUNT,
    CameraRig,
    NoiseModel,
    ScriptedChannel,
    Trajectory,
    frame_stream,
    generate_world,
)
from .snapshot import encode_snapshot
from .transport import Endpoint

log = logging.getLogger(__name__)

MOUNTS = {"front": FRONT_MOUNT, "rear": REAR_MOUNT}
MAX_SETTLE_ROUNDS = 20000


@dataclass
class ClientSummary:
    client_id: int
    robot: str
    kind: str
    sessions: int
    frames: int
    keyframes: int
    peak_keyframes: int
    peak_landmarks: int
    memory_violations: int
    init_frames: int | None = None
    tracked_before_registration: bool = False
    merge_after_kfs: dict = field(default_factory=dict)  # session -> own keyframes when first joined another map


@dataclass
class RunReport:
    name: str
    seed: int
    ate: dict  # client id -> m (None if not computable)
    ate_all: float | None
    final_map_count: int
    timings: dict
    uplink_bytes: int
    downlink_bytes: int
    bytes_by_type: dict
    retransmit_bytes: int
    audit_failures: list
    clients: list
    server: dict
    wall_time_s: float
    deadlock: bool = False
    assertions: dict = field(default_factory=dict)
    bandwidth: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return all(self.assertions.values())

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("bandwidth")
        d["passed"] = self.passed
        return d

    def write(self, out_dir: str | Path, snapshot: bytes | None = None) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "bandwidth": out / "bandwidth.csv", "timings": out / "timings.csv"}
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
        with paths["bandwidth"].open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["link", "direction", "t", "bytes"])
            w.writeheader()
            w.writerows(self.bandwidth)
        with paths["timings"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["procedure", "count", "mean_ms", "std_ms", "max_ms"])
            for k, v in self.timings.items():
                w.writerow([k, v["count"], v["mean_ms"], v["std_ms"], v["max_ms"]])
        if snapshot is not None:
            paths["snapshot"] = out / "snapshot.bin"
            paths["snapshot"].write_bytes(snapshot)
        return {k: str(v) for k, v in paths.items()}


class _Link:
    """A client, its current-session endpoint, and the two scripted channels to the server."""

    def __init__(self, sim: "Simulation", robot, cam, client: Client, rig: CameraRig, seed: int):
        self.sim = sim
        self.robot = robot
        self.cam = cam
        self.client = client
        self.rig = rig
        net = sim.scenario.network
        self.up = ScriptedChannel(net.loss, net.drop_seqs, tuple(net.latency), seed=seed * 1000 + 2 * cam.id)
        self.down = ScriptedChannel(net.loss, (), tuple(net.latency), seed=seed * 1000 + 2 * cam.id + 1)
        self.endpoint: Endpoint | None = None
        self.session = 0
        self.name = f"client:{cam.id}"
        self._seen_up: set = set()
        self._seen_down: set = set()
        self.frames = 0
        self.memory_violations = 0
        self.init_frames: int | None = None
        self.tracked_before_registration = False
        self.truth: dict = {}  # timestamp -> world_from_cam
        self.lock = threading.Lock()

    def _record(self, frame: bytes, direction: str, now: float, seen: set) -> None:
        mtype, _, sid, seq = P.peek_header(frame)
        retrans = False
        if mtype not in P.UNSEQUENCED:
            key = (sid, seq)
            retrans = key in seen
            seen.add(key)
        self.sim.meter.record(now, self.name, direction, frame, mtype, retrans)

    def _uplink(self, frame: bytes, now: float) -> None:
        self._record(frame, "up", now, self._seen_up)
        self.up.send(frame, now)

    def flush(self, now: float) -> None:
        c = self.client
        if not c.outbox:
            return
        if c.session_id != self.session:
            self.endpoint = Endpoint(c.cfg.client_id, c.session_id, self.sim.scenario.network.window)
            self.session = c.session_id
        for m in c.outbox:
            frame = self.endpoint.send(m)
            if m.msg_type == P.MsgType.MAP_UPDATE:
                self.sim.map_update_bytes += len(frame)
            self._uplink(frame, now)
        c.outbox.clear()

    def _deliver(self, frame: bytes, now: float) -> None:
        m = P.decode(frame)
        if self.endpoint is None or m.session_id != self.client.session_id:
            return  # addressed to an abandoned session
        delivered, replies = self.endpoint.receive(m)
        for r in replies:
            self._uplink(r, now)
        for msg in delivered:
            self.client.apply_server_message(msg)
        self.flush(now)

    def pump(self, now: float) -> bool:
        moved = False
        server = self.sim.server
        for fr in self.up.receive():
            server.on_frame(fr)
            moved = True
        for _, _, fr in server.take_outgoing(self.cam.id):
            self._record(fr, "down", now, self._seen_down)
            self.down.send(fr, now)
            moved = True
        for fr in self.down.receive():
            self._deliver(fr, now)
            moved = True
        return moved

    def settled(self) -> bool:
        sid = self.client.session_id
        ep_ok = self.endpoint is None or self.session != sid or self.endpoint.settled()
        return ep_ok and not len(self.up) and not len(self.down) and self.sim.server.settled(self.cam.id, sid)

    def settle(self, now: float) -> None:
        self.flush(now)
        for _ in range(MAX_SETTLE_ROUNDS):
            if self.pump(now):
                continue
            if self.settled():
                return
            if self.endpoint is not None and self.session == self.client.session_id:
                for fr in self.endpoint.idle():
                    self._uplink(fr, now)
            self.sim.server.idle(self.cam.id, self.client.session_id)
        raise RuntimeError(f"{self.name}: link failed to settle")

    def summary(self) -> dict:
        c = self.client
        return {
            "sessions": c.session_id,
            "frames": self.frames,
            "peak_keyframes": c.peak_keyframes,
            "peak_landmarks": c.peak_landmarks,
            "memory_violations": self.memory_violations,
            "init_frames": self.init_frames,
            "tracked_before_registration": self.tracked_before_registration,
        }

    def adopt_remote(self, data: dict) -> None:
        """Take over the summary and truth reported by a client process."""
        self.remote = data
        self.frames = data["frames"]
        self.init_frames = data["init_frames"]
        self.memory_violations = data["memory_violations"]
        self.tracked_before_registration = data["tracked_before_registration"]
        self.truth = {round(t, 6): Pose.from_array(p) for t, p in data["truth"]}

    def step(self, frame, truth) -> None:
        c = self.client
        self.frames += 1
        self.truth[round(truth.timestamp, 6)] = truth.world_from_cam
        if c.initialized and self.init_frames is None:
            self.init_frames = self.frames - 1  # frames consumed before the map was usable
        c.process_frame(frame)
        if c.cfg.monocular and c.initialized and not any(e.startswith("place recognition ok") for e in c.events):
            self.tracked_before_registration = True
        if self.sim.audit_memory:
            n_kf, n_lm, n_aug = c.retained_counts()
            bad = c.audit_memory()
            if n_kf > c.cfg.window or n_aug > c.cfg.augment_cap or bad:
                self.memory_violations += 1


def build_camera(scenario: Scenario, world, noise: NoiseModel, robot, cam, seed: int, timings: Timings | None = None):
    """Client agent, camera rig and frame stream for one scenario camera."""
    mono = cam.kind == "mono"
    k = MONO_INTRINSICS if mono else DEPTH_INTRINSICS
    mount = MOUNTS[cam.mount]
    rig = CameraRig(cam.id, mount, k, mono, cam.rate_hz, cam.time_offset, [tuple(b) for b in cam.blind])
    client = Client(ClientConfig(cam.id, k, mount, cam.id, mono, window=cam.window,
                                 augment_cap=cam.augment_cap, match_mode=cam.match_mode), timings)
    traj = Trajectory(robot.waypoints, robot.speed, start_time=robot.start_time)
    return client, rig, frame_stream(world, traj, rig, noise, seed, cam.id, scenario.duration)


def server_config(scenario: Scenario) -> ServerConfig:
    """Server settings and calibrated rigid pairs declared by a scenario."""
    mounts = {c.id: MOUNTS[c.mount] for _, c in scenario.cameras()}
    pairs = []
    for rp in scenario.rigid_pairs:
        if rp.a not in mounts or rp.b not in mounts:
            raise ConfigError(f"rigid pair ({rp.a}, {rp.b}) names an unknown camera")
        pairs.append(RigidPair(rp.a, rp.b, compose(inverse(mounts[rp.b]), mounts[rp.a])))
    s = scenario.server
    return ServerConfig(cell_size=s.cell_size, loop_min_score=s.loop_min_score, min_inliers=s.min_inliers,
                        max_rms=s.max_rms, rigid_pairs=pairs, exclusion=s.exclusion, pause_ticks=s.pause_ticks,
                        pgo_iters=s.pgo_iters, window=scenario.network.window)


def scenario_world(scenario: Scenario, seed: int):
    w = scenario.world
    regions = [(r.lo, r.hi, r.count) for r in w.regions] if w.regions else None
    n = scenario.noise
    noise = NoiseModel(n.pixel_sigma, n.depth_sigma_frac, n.dropout, n.signature_dropout,
                       n.odom_sigma_t, n.odom_sigma_r, n.descriptor_bit_flips)
    return generate_world(w.bounds, w.count, seed, w.height, regions), noise


class Simulation:
    def __init__(self, scenario: Scenario, seed: int | None = None, deterministic: bool = True,
                 audit_memory: bool = False, watchdog_s: float = 60.0, transport: str = "inproc"):
        if transport not in ("inproc", "socket"):
            raise ValueError(f"unknown transport {transport!r}")
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.deterministic = deterministic
        self.audit_memory = audit_memory
        self.watchdog_s = watchdog_s
        self.timings = Timings()
        self.meter = BandwidthMeter()
        self.map_update_bytes = 0
        self.world, self.noise = scenario_world(scenario, self.seed)
        self.transport = transport
        self.server = Server(server_config(scenario), self.timings)
        self.links: list[_Link] = []
        self.streams = []
        for robot, cam in scenario.cameras():
            client, rig, stream = build_camera(scenario, self.world, self.noise, robot, cam, self.seed, self.timings)
            self.links.append(_Link(self, robot, cam, client, rig, self.seed))
            self.streams.append(stream)

    # ------------------------------------------------------------------ execution

    def _merged_frames(self):
        def keyed(i, s):
            for f, truth in s:
                yield (f.timestamp, self.links[i].cam.id), i, f, truth

        return heapq.merge(*(keyed(i, s) for i, s in enumerate(self.streams)), key=lambda x: x[0])

    def _settle_all(self, now: float) -> None:
        for link in self.links:
            link.settle(now)

    def _note_merges(self, state: dict) -> None:
        if self.server.stats.merges == state.get("merges", 0):
            return
        state["merges"] = self.server.stats.merges
        for link in self.links:
            c = link.client
            key = (c.cfg.client_id, c.session_id)
            h = self.server.handlers.get(key)
            if h is None or not h.map_id or key in state.setdefault("joined", set()):
                continue
            mp = self.server.maps.get(h.map_id)
            if mp is not None and any((k.client_id, k.session_id) != key for k in mp.keyframes):
                state["joined"].add(key)
                link.merge_after = getattr(link, "merge_after", {})
                link.merge_after[c.session_id] = h.kf_count

    def run(self) -> RunReport:
        t0 = time.perf_counter()
        deadlock = False
        if self.transport == "socket":
            deadlock = self._run_socket()
        elif self.deterministic:
            self._run_deterministic()
        else:
            deadlock = self._run_threaded()
        return self._report(time.perf_counter() - t0, deadlock)

    def _run_deterministic(self) -> None:
        state: dict = {}
        now = 0.0
        for (now, _), i, f, truth in self._merged_frames():
            link = self.links[i]
            link.step(f, truth)
            link.settle(now)
            self.server.tick()
            self._settle_all(now)
            self._note_merges(state)
        self._finish(now, state)

    def _finish(self, now: float, state: dict, settle: bool = True) -> None:
        for _ in range(100):
            self.server.drain_jobs()
            if settle:
                self._settle_all(now)
            self.server.tick()
            if settle:
                self._settle_all(now)
                self._note_merges(state)
            if not self.server.queue and not self.server.jobs:
                break

    def _run_threaded(self) -> bool:
        state: dict = {}
        stop = threading.Event()
        errors: list = []
        lock = threading.Lock()  # guards the shared merge bookkeeping only

        def worker():
            while not stop.is_set():
                try:
                    self.server.tick()
                    with lock:
                        self._note_merges(state)
                except Exception as exc:  # pragma: no cover - surfaced in the report
                    errors.append(exc)
                    return
                time.sleep(0.001)

        def client_loop(i: int):
            link = self.links[i]
            try:
                for f, truth in self.streams[i]:
                    with link.lock:
                        link.step(f, truth)
                        link.settle(f.timestamp)
            except Exception as exc:  # pragma: no cover - surfaced in the report
                errors.append(exc)

        opt = threading.Thread(target=worker, name="global-optimizer", daemon=True)
        threads = [threading.Thread(target=client_loop, args=(i,), name=l.name, daemon=True)
                   for i, l in enumerate(self.links)]
        opt.start()
        for t in threads:
            t.start()
        # watchdog: a deadlock shows up as no frame or tick progress for watchdog_s
        deadlock = False
        last, last_change = None, time.monotonic()
        while any(t.is_alive() for t in threads):
            progress = (sum(l.frames for l in self.links), self.server.tick_count)
            if progress != last:
                last, last_change = progress, time.monotonic()
            elif time.monotonic() - last_change > self.watchdog_s:
                deadlock = True
                break
            time.sleep(0.05)
        stop.set()
        opt.join(self.watchdog_s)
        if opt.is_alive():
            deadlock = True
        if errors:
            raise errors[0]
        if not deadlock:
            self._finish(0.0, state)
        return deadlock

    def _run_socket(self) -> bool:
        """Server in this process, one client process per camera over TCP."""
        listener = FrameListener(self.server).start()
        worker = OptimizerWorker(self.server).start()
        host, port = listener.address
        deadlock = False
        try:
            with tempfile.TemporaryDirectory() as td:
                cfg = Path(td) / "scenario.yaml"
                cfg.write_text(yaml.safe_dump(self.scenario.model_dump(mode="json"), sort_keys=False))
                procs = []
                for link in self.links:
                    out = Path(td) / f"client{link.cam.id}.json"
                    cmd = [sys.executable, "-m", "collabslam.cli", "client", "--config", str(cfg),
                           "--camera", str(link.cam.id), "--connect", f"{host}:{port}",
                           "--seed", str(self.seed), "--out", str(out)]
                    procs.append((link, out, subprocess.Popen(cmd)))
                for link, out, p in procs:
                    try:
                        p.wait(timeout=max(self.watchdog_s, 600.0))
                    except subprocess.TimeoutExpired:
                        p.kill()
                        deadlock = True
                        continue
                    if p.returncode != 0:
                        raise RuntimeError(f"client {link.cam.id} exited with {p.returncode}")
                    link.adopt_remote(json.loads(out.read_text()))
        finally:
            worker.stop()
            listener.stop()
        self._finish(0.0, {}, settle=False)
        return deadlock

    # ------------------------------------------------------------------ evaluation

    def snapshot(self) -> bytes:
        with self.server.meta:
            return encode_snapshot(dict(self.server.maps))

    def trajectory(self, client_ids=None, map_id: int | None = None):
        """(timestamps, estimated xyz, true xyz) for real keyframes of ``client_ids``."""
        truth = {}
        for link in self.links:
            if client_ids is None or link.cam.id in client_ids:
                truth.update({(link.cam.id, t): p for t, p in link.truth.items()})
        ts, est, gt = [], [], []
        maps = [self.server.maps[map_id]] if map_id is not None else self.server.maps.values()
        for mp in maps:
            for kf in sorted(mp.real_keyframes(), key=lambda k: (k.timestamp, k.id)):
                if client_ids is not None and kf.id.client_id not in client_ids:
                    continue
                p = truth.get((kf.id.client_id, round(kf.timestamp, 6)))
                if p is None:
                    continue
                ts.append(kf.timestamp)
                est.append(kf.pose.t)
                gt.append(p.t)
        return np.array(ts), np.array(est).reshape(-1, 3), np.array(gt).reshape(-1, 3)

    def _largest_map_of(self, client_id: int) -> int | None:
        best = None
        for mid, mp in self.server.maps.items():
            n = sum(1 for k in mp.keyframes if k.client_id == client_id)
            if n and (best is None or n > best[0]):
                best = (n, mid)
        return best[1] if best else None

    def ate(self, client_ids=None, with_scale: bool = False, map_id: int | None = None) -> float | None:
        ts, est, gt = self.trajectory(client_ids, map_id)
        if len(ts) < 3:
            return None
        try:
            # rows are already paired; index keys keep equal timestamps of different clients apart
            idx = np.arange(len(ts), dtype=float)
            return compute_ate(idx, est, idx, gt, with_scale=with_scale)
        except (TooFewAssociations, TooFewPoints, DegenerateConfiguration):
            return None

    def _report(self, wall: float, deadlock: bool) -> RunReport:
        sc = self.scenario
        ate = {}
        for link in self.links:
            mid = self._largest_map_of(link.cam.id)
            ate[link.cam.id] = None if mid is None else self.ate([link.cam.id], link.client.cfg.monocular, mid)
        largest = max(self.server.maps.values(), key=lambda m: len(m.real_keyframes()), default=None)
        depth_ids = [l.cam.id for l in self.links if not l.client.cfg.monocular]
        ate_all = self.ate(depth_ids, map_id=largest.map_id) if largest is not None and depth_ids else None
        audit_failures = self.server.audit_all()
        st = self.server.stats
        checks = list(st.loop_checks.values())
        clients = []
        for link in self.links:
            info = getattr(link, "remote", None) or link.summary()
            clients.append(ClientSummary(
                link.cam.id, link.robot.name, link.cam.kind, info["sessions"], info["frames"],
                sum(1 for mp in self.server.maps.values() for k in mp.keyframes if k.client_id == link.cam.id),
                info["peak_keyframes"], info["peak_landmarks"], info["memory_violations"], info["init_frames"],
                info["tracked_before_registration"], dict(getattr(link, "merge_after", {}))))
        by_type = {P.MsgType(t).name: self.meter.total(msg_type=t) for t in P.MsgType}
        final_maps = len(self.server.non_empty_maps())
        report = RunReport(
            name=sc.name,
            seed=self.seed,
            ate=ate,
            ate_all=ate_all,
            final_map_count=final_maps,
            timings=self.timings.summary(),
            uplink_bytes=self.meter.total("up") + sum(getattr(l, "remote", {}).get("bytes_up", 0) for l in self.links),
            downlink_bytes=self.meter.total("down") + sum(getattr(l, "remote", {}).get("bytes_down", 0)
                                                          for l in self.links),
            bytes_by_type=by_type,
            retransmit_bytes=sum(r.nbytes for r in self.meter.records if r.retransmit),
            audit_failures=audit_failures,
            clients=clients,
            server={
                "merges": st.merges,
                "pgo_runs": st.pgo_runs,
                "loops_verified": st.loops_verified,
                "loops_rejected": st.loops_rejected,
                "rigid_edges": st.rigid_edges,
                "augment_messages": st.augment_messages,
                "augment_landmarks": st.augment_landmarks,
                "exclusion_violations": st.exclusion_violations,
                "applied_while_paused": st.applied_while_paused,
                "received_while_paused": st.received_while_paused,
                "backlog_applied": st.backlog_applied,
                "loop_checks_min": min(checks) if checks else 0,
                "loop_checks_max": max(checks) if checks else 0,
                "place_rec_success": st.place_rec_success,
                "place_rec_failure": st.place_rec_failure,
                "decode_errors": st.decode_errors,
            },
            wall_time_s=wall,
            deadlock=deadlock,
            bandwidth=self.meter.timeline(1.0),
        )
        a = sc.assertions
        checks_out = {"no_deadlock": not deadlock}
        if a.audit_clean:
            checks_out["audit_clean"] = not audit_failures
        if a.max_maps is not None:
            checks_out["max_maps"] = final_maps <= a.max_maps
        if a.max_ate is not None:
            vals = [v for cid, v in ate.items() if cid in depth_ids]
            checks_out["max_ate"] = bool(vals) and all(v is not None and v < a.max_ate for v in vals)
        if a.max_mono_ate is not None:
            vals = [v for l, v in zip(self.links, ate.values()) if l.client.cfg.monocular]
            checks_out["max_mono_ate"] = bool(vals) and all(v is not None and v < a.max_mono_ate for v in vals)
        report.assertions = checks_out
        return report


def run_client_process(scenario: Scenario, camera_id: int, host: str, port: int, seed: int | None = None,
                       audit_memory: bool = False) -> dict:
    """Drive one scenario camera against a remote server; returns its summary and truth."""
    seed = scenario.seed if seed is None else seed
    world, noise = scenario_world(scenario, seed)
    for robot, cam in scenario.cameras():
        if cam.id == camera_id:
            break
    else:
        raise ValueError(f"scenario has no camera {camera_id}")
    client, _, stream = build_camera(scenario, world, noise, robot, cam, seed)
    link = SocketClientLink(client, host, port, scenario.network.window)
    init_frames, frames, violations, early = None, 0, 0, False
    truth = []
    try:
        for f, t in stream:
            if client.initialized and init_frames is None:
                init_frames = frames
            frames += 1
            truth.append((t.timestamp, t.world_from_cam.to_array().tolist()))
            client.process_frame(f)
            if client.cfg.monocular and client.initialized and not any(
                    e.startswith("place recognition ok") for e in client.events):
                early = True
            if audit_memory and (client.audit_memory() or len(client.window) > client.cfg.window):
                violations += 1
            link.flush()
            link.poll(0.2 if client.awaiting_place_rec else 0.0)
        link.settle()
    finally:
        link.close()
    return {
        "camera": camera_id,
        "sessions": client.session_id,
        "frames": frames,
        "peak_keyframes": client.peak_keyframes,
        "peak_landmarks": client.peak_landmarks,
        "memory_violations": violations,
        "init_frames": init_frames,
        "tracked_before_registration": early,
        "bytes_up": link.bytes_up,
        "bytes_down": link.bytes_down,
        "truth": truth,
    }


def run_scenario(scenario: Scenario, seed: int | None = None, deterministic: bool = True,
                 out_dir: str | Path | None = None, audit_memory: bool = False,
                 transport: str = "inproc") -> tuple[RunReport, bytes]:
    sim = Simulation(scenario, seed, deterministic, audit_memory, transport=transport)
    report = sim.run()
    snap = sim.snapshot()
    if out_dir is not None:
        report.write(out_dir, snap)
    return report, snap
