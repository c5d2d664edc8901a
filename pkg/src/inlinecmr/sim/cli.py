"""Simulator command line.

    inline-sim run --kind sax --endpoint 127.0.0.1:9122 --seed 7 --out DIR
    inline-sim run --kind sax --endpoint local --out DIR    # in-process server
    inline-sim verify --run DIR [--tol-file F]

``run`` generates a deterministic synthetic session, streams it, and
records the manifest plus every reply (replayable capture). ``verify``
regenerates the ground truth from the manifest, checks the recorded
reports against it, renders PNGs, and writes a verdict file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from ..server import InlineServer
from ..wire import FrameDecoder, Report
from . import phantom, session, verify
from .client import run_client

log = logging.getLogger(__name__)


def _params_from_args(args):
    params = phantom.PhantomParams(seed=args.seed)
    overrides = json.loads(args.params) if args.params else {}
    if args.pacing_scale != 1.0:
        overrides.setdefault("slice_ms", params.slice_ms * args.pacing_scale)
        overrides.setdefault("gap_ms", params.gap_ms * args.pacing_scale)
    if overrides:
        params = dataclasses.replace(params, **overrides)
    return params


def cmd_run(args):
    params = _params_from_args(args)
    messages, _ = session.generate_session(
        args.kind, params, trigger=args.trigger,
        worker_cmd=args.worker_cmd, model=args.model)

    server = None
    endpoint = args.endpoint
    if endpoint == "local":
        server = InlineServer(port=0).start()
        endpoint = f"127.0.0.1:{server.port}"
        log.info("started in-process server on %s", endpoint)
    try:
        result = run_client(endpoint, messages, pacing=args.pacing,
                            slice_ms=params.slice_ms, gap_ms=params.gap_ms)
    finally:
        if server is not None:
            server.stop()

    os.makedirs(args.out, exist_ok=True)
    manifest = {
        "kind": args.kind,
        "seed": args.seed,
        "trigger": args.trigger,
        "worker_cmd": args.worker_cmd,
        "model": args.model,
        "params": dataclasses.asdict(params),
        "endpoint": endpoint,
        "messages_sent": len(messages),
        "timing": {
            "last_acquisition_ts": result.timing.last_acquisition_ts,
            "first_image_ts": result.timing.first_image_ts,
            "first_result_ts": result.timing.first_result_ts,
            "last_result_ts": result.timing.last_result_ts,
            "first_result_latency_s": result.timing.first_result_latency_s,
            "post_acquisition_s": result.timing.post_acquisition_s,
        },
        "received_counts": dict(result.summary.counts),
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(os.path.join(args.out, "capture.bin"), "wb") as fh:
        fh.write(result.raw_received)
    for idx, message in enumerate(m for m in result.received
                                  if isinstance(m, Report)):
        path = os.path.join(args.out, f"report_{idx}.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(message.text)
    print(f"run complete: {len(result.received)} replies recorded in {args.out}")
    if result.timing.first_result_latency_s is not None:
        print(f"first result {result.timing.first_result_latency_s:+.3f}s "
              "relative to end of acquisition")
    return 0


def _load_capture(path):
    decoder = FrameDecoder()
    with open(path, "rb") as fh:
        return decoder.feed(fh.read())


def cmd_verify(args):
    with open(os.path.join(args.run, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    params_dict = dict(manifest["params"])
    for key in ("rest_flows", "stress_flows"):
        params_dict[key] = {int(k): v for k, v in params_dict[key].items()}
    for key in ("ed_axes_mm", "es_axes_mm", "rv_arc_deg"):
        params_dict[key] = tuple(params_dict[key])
    params = phantom.PhantomParams(**params_dict)
    kind = manifest["kind"]
    _, truth = session.generate_session(kind, params,
                                        trigger=manifest["trigger"])

    received = _load_capture(os.path.join(args.run, "capture.bin"))
    tolerances = None
    if args.tol_file:
        with open(args.tol_file, "r", encoding="utf-8") as fh:
            tolerances = json.load(fh)
    verdict = verify.verify_run(received, truth, kind, tolerances)
    written = verify.render_outputs(received, args.run)

    with open(os.path.join(args.run, "verdict.json"), "w", encoding="utf-8") as fh:
        fh.write(verdict.to_json())
    summary = verdict.summary_text()
    with open(os.path.join(args.run, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary)
    print(summary, end="")
    print(f"{len(written)} PNG file(s) rendered")
    return 0 if verdict.passed else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="inline-sim",
                                     description="Scanner simulator client")
    parser.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="generate and stream one session")
    run_p.add_argument("--kind", required=True, choices=session.KINDS)
    run_p.add_argument("--endpoint", default="local",
                       help='"host:port" or "local" for an in-process server')
    run_p.add_argument("--seed", type=int, default=1234)
    run_p.add_argument("--out", required=True)
    run_p.add_argument("--trigger", default="slice",
                       choices=["slice", "phase", "repetition", "none"])
    run_p.add_argument("--pacing", action="store_true",
                       help="pace acquisition sends (else blast at full speed)")
    run_p.add_argument("--pacing-scale", type=float, default=1.0,
                       help="scale factor on the per-slice/gap durations")
    run_p.add_argument("--params", default=None,
                       help="JSON object overriding phantom parameters")
    run_p.add_argument("--worker-cmd", default=session.STUB_WORKER_CMD,
                       help="model worker command; {python} expands to the "
                            "server's interpreter")
    run_p.add_argument("--model", default=None,
                       help="model id to load (default: per session kind)")
    run_p.set_defaults(func=cmd_run)

    verify_p = sub.add_parser("verify", help="check a recorded run")
    verify_p.add_argument("--run", required=True)
    verify_p.add_argument("--tol-file", default=None)
    verify_p.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConnectionError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
