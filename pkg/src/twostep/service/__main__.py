"""Run the HTTP service: python3 -m twostep.service --root DIR."""

import argparse

import uvicorn

from .app import create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="twostep.service")
    parser.add_argument("--root", default="twostep-service",
                        help="directory for projects, datasets, and runs")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    uvicorn.run(create_app(args.root), host=args.host, port=args.port,
                log_level=args.log_level)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
