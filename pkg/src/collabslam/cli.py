"""Command-line entry points.

    collabslam run --config scenario.yaml [--seed N] [--threaded] [--transport inproc|socket] [--out-dir D]
    collabslam serve [--host H] [--port P] [--frame-port F] [--snapshot FILE]
    collabslam client --config scenario.yaml --camera ID --connect HOST:PORT [--out FILE]
    collabslam replay-snapshot --snapshot FILE
    collabslam inspect-snapshot --snapshot FILE
    collabslam ate --estimate est.csv --truth truth.csv [--with-scale]
    collabslam status --url URL
    collabslam snapshot --url URL --out FILE
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import CollabSlamError, ConfigError

log = logging.getLogger("collabslam")


def _cmd_run(args) -> int:
    from .runner import run_scenario
    from .scenario import load_scenario

    sc = load_scenario(args.config)
    report, snap = run_scenario(sc, seed=args.seed, deterministic=args.deterministic, out_dir=args.out_dir,
                                audit_memory=args.audit_memory, transport=args.transport)
    if args.snapshot:
        Path(args.snapshot).write_bytes(snap)
    print(f"scenario {report.name} seed {report.seed}: {report.final_map_count} map(s), "
          f"{report.wall_time_s:.1f} s wall")
    for cid, ate in sorted(report.ate.items()):
        print(f"  client {cid}: ATE {'n/a' if ate is None else f'{ate:.4f} m'}")
    for name, ok in report.assertions.items():
        print(f"  {'PASS' if ok else 'FAIL'} {name}")
    if args.out_dir:
        print(f"  report written to {args.out_dir}")
    return 0 if report.passed else 1


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceSettings, create_app

    settings = ServiceSettings(frame_host=args.host, frame_port=args.frame_port, snapshot_path=args.snapshot,
                               scenario=args.config)
    uvicorn.run(create_app(settings), host=args.host, port=args.port, log_level="info")
    return 0


def _cmd_client(args) -> int:
    from .runner import run_client_process
    from .scenario import load_scenario

    host, _, port = args.connect.rpartition(":")
    sc = load_scenario(args.config)
    out = run_client_process(sc, args.camera, host or "127.0.0.1", int(port), seed=args.seed,
                             audit_memory=args.audit_memory)
    text = json.dumps(out)
    if args.out:
        Path(args.out).write_text(text)
    else:
        summary = {k: v for k, v in out.items() if k != "truth"}
        print(json.dumps(summary, indent=2))
    return 0


def _load_snapshot(path: str):
    from .snapshot import decode_snapshot

    return decode_snapshot(Path(path).read_bytes())


def _cmd_inspect(args) -> int:
    from .snapshot import summarize

    maps = _load_snapshot(args.snapshot)
    rows = summarize(maps)
    print(f"{'map':>5} {'kfs':>6} {'virtual':>7} {'landmarks':>9} {'edges':>6}  clients")
    for r in rows:
        print(f"{r['map_id']:>5} {r['keyframes']:>6} {r['virtual_keyframes']:>7} {r['landmarks']:>9} "
              f"{r['edges']:>6}  {','.join(map(str, r['clients']))}")
    return 0


def _cmd_replay(args) -> int:
    """Load a snapshot into a fresh map database and check it end to end."""
    from .mapcore import audit
    from .snapshot import encode_snapshot

    raw = Path(args.snapshot).read_bytes()
    maps = _load_snapshot(args.snapshot)
    problems = [f"map {mid}: {p}" for mid, m in maps.items() for p in audit(m)]
    same = encode_snapshot(maps) == raw
    print(f"{len(maps)} map(s), {sum(len(m.keyframes) for m in maps.values())} keyframes, "
          f"{sum(len(m.landmarks) for m in maps.values())} landmarks")
    print(f"re-encoding identical: {same}")
    for p in problems:
        print(f"audit: {p}")
    return 0 if same and not problems else 1


def _read_traj(path: str) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    if data.shape[1] < 4:
        raise ConfigError(f"{path}: expected columns t,x,y,z")
    return data[:, 0], data[:, 1:4]


def _cmd_ate(args) -> int:
    from .metrics import compute_ate

    te, xe = _read_traj(args.estimate)
    tt, xt = _read_traj(args.truth)
    print(f"{compute_ate(te, xe, tt, xt, with_scale=args.with_scale, max_dt=args.max_dt):.6f}")
    return 0


def _cmd_status(args) -> int:
    import httpx

    r = httpx.get(args.url.rstrip("/") + "/v1/stats", timeout=10.0)
    r.raise_for_status()
    print(json.dumps(r.json(), indent=2))
    return 0


def _cmd_snapshot(args) -> int:
    import httpx

    r = httpx.get(args.url.rstrip("/") + "/v1/snapshot", timeout=60.0)
    r.raise_for_status()
    Path(args.out).write_bytes(r.content)
    print(f"wrote {len(r.content)} bytes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collabslam", description="Collaborative SLAM server, clients and simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run a scenario and write its report")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    mode = run.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", dest="deterministic", action="store_true", default=True,
                      help="single-threaded, bit-reproducible (default)")
    mode.add_argument("--threaded", dest="deterministic", action="store_false",
                      help="one thread per client plus a concurrent global worker")
    run.add_argument("--transport", choices=("inproc", "socket"), default="inproc")
    run.add_argument("--out-dir")
    run.add_argument("--snapshot", help="also write the final map snapshot here")
    run.add_argument("--audit-memory", action="store_true", help="audit client memory bounds every frame")
    run.set_defaults(func=_cmd_run)

    serve = sub.add_parser("serve", help="run the map server with its HTTP API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8080)
    serve.add_argument("--frame-port", type=int, default=7400, help="TCP port for protocol frames")
    serve.add_argument("--config", help="scenario file supplying server settings and rigid pairs")
    serve.add_argument("--snapshot", default="snapshot.bin", help="file written by POST /v1/snapshot")
    serve.set_defaults(func=_cmd_serve)

    client = sub.add_parser("client", help="run one simulated camera against a server")
    client.add_argument("--config", required=True)
    client.add_argument("--camera", type=int, required=True)
    client.add_argument("--connect", default="127.0.0.1:7400")
    client.add_argument("--seed", type=int)
    client.add_argument("--out")
    client.add_argument("--audit-memory", action="store_true")
    client.set_defaults(func=_cmd_client)

    for name, fn, text in (("replay-snapshot", _cmd_replay, "reload, audit and re-encode a snapshot"),
                           ("inspect-snapshot", _cmd_inspect, "summarise the maps in a snapshot")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--snapshot", required=True)
        sp.set_defaults(func=fn)

    ate = sub.add_parser("ate", help="trajectory error between two t,x,y,z CSV files")
    ate.add_argument("--estimate", required=True)
    ate.add_argument("--truth", required=True)
    ate.add_argument("--with-scale", action="store_true")
    ate.add_argument("--max-dt", type=float, default=0.01)
    ate.set_defaults(func=_cmd_ate)

    status = sub.add_parser("status", help="print a running server's statistics")
    status.add_argument("--url", default="http://127.0.0.1:8080")
    status.set_defaults(func=_cmd_status)

    snap = sub.add_parser("snapshot", help="download a running server's map snapshot")
    snap.add_argument("--url", default="http://127.0.0.1:8080")
    snap.add_argument("--out", required=True)
    snap.set_defaults(func=_cmd_snapshot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CollabSlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
