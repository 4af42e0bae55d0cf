"""Command line front end: a thin client over the service API.

Every subcommand builds a request model and posts it to the FastAPI app --
in-process by default (each invocation is one isolated pipeline run), or to
a remote instance when --server is given. `echofusion serve` runs the
service standalone.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys

import httpx

from . import __version__


def _call(endpoint: str, payload: dict, server: str | None):
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(endpoint, json=payload)

    from .service import create_app

    async def go():
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://echofusion.local",
                                     timeout=None) as client:
            return await client.post(endpoint, json=payload)

    return asyncio.run(go())


def _finish(response, render=None) -> int:
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except (ValueError, KeyError):
            detail = response.text
        print(f"error: {detail}", file=sys.stderr)
        return 1
    body = response.json()
    print(render(body) if render else json.dumps(body, indent=2))
    return 0


def cmd_sim(args) -> int:
    payload = {"config_path": args.config, "out_dir": args.out,
               "overrides": args.set or []}
    return _finish(_call("/sim", payload, args.server),
                   lambda b: f"wrote {b['frames']} frame pairs to {b['out_dir']}\n"
                             f"ground truth: {b['gt_path']}")


def cmd_track(args) -> int:
    payload = {
        "frames_dir": args.frames,
        "out_dir": args.out,
        "segmentation": args.segmentation,
        "camera_mode": args.camera,
        "distance_mm": args.distance_mm,
        "view_angle_deg": args.view_angle_deg,
        "config_path": args.config,
        "overrides": args.set or [],
    }
    return _finish(_call("/track", payload, args.server),
                   lambda b: f"tracked {b['total_frames']} frames, "
                             f"{b['losses']} losses (longest run {b['longest_run']})\n"
                             f"trajectory: {b['trajectory_path']}\n"
                             f"mesh: {b['mesh_path']}")


def cmd_fuse(args) -> int:
    payload = {
        "frames_dir": args.frames,
        "trajectory_path": args.trajectory,
        "out_path": args.out,
        "camera_mode": args.camera,
        "distance_mm": args.distance_mm,
        "view_angle_deg": args.view_angle_deg,
        "config_path": args.config,
        "overrides": args.set or [],
    }
    return _finish(_call("/fuse", payload, args.server),
                   lambda b: f"compounded {b['frames_used']} frames into "
                             f"{b['volume_path']}\nslices: "
                             + ", ".join(b["slice_paths"]))


def cmd_eval(args) -> int:
    payload = {"trajectory_paths": args.trajectory, "gt_path": args.gt,
               "seg_pairs_dir": args.seg_pairs}
    response = _call("/eval", payload, args.server)
    if response.status_code != 200:
        return _finish(response)
    body = response.json()
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump(body["report"], f, indent=2, sort_keys=True)
            f.write("\n")
    print(body["text"], end="")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echofusion",
        description="sector-aware depth tracking and 3D ultrasound compounding")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--server", default=None,
                        help="URL of a running echofusion service "
                             "(default: run in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", help="render a synthetic phantom sequence")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("track", help="track a frame sequence into a surface model")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segmentation", choices=["external", "threshold"],
                   default="external")
    p.add_argument("--camera", choices=["auto", "manual"], default="auto")
    p.add_argument("--distance-mm", type=float, default=None)
    p.add_argument("--view-angle-deg", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("fuse", help="compound tracked frames into one volume")
    p.add_argument("--frames", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--camera", choices=["auto", "manual"], default="auto")
    p.add_argument("--distance-mm", type=float, default=None)
    p.add_argument("--view-angle-deg", type=float, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("eval", help="robustness / accuracy report")
    p.add_argument("--trajectory", required=True, nargs="+")
    p.add_argument("--gt", default=None)
    p.add_argument("--seg-pairs", default=None)
    p.add_argument("--json-out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", help="run the service over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
