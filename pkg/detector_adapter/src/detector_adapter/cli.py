"""Command-line front end for the adapter service."""

from __future__ import annotations

import argparse
import logging
import sys

from .adapter import AdapterConfig, load_adapter_config, serve
from .models import ModelLoadError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="detector-adapter",
        description="Serve 2D flower detections over a file-exchange directory")
    parser.add_argument("--exchange", required=True, help="exchange directory")
    parser.add_argument("--config", default=None, help="adapter config JSON")
    parser.add_argument("--model", default=None,
                        help="model id: stub | hsv | python:<module>:<callable>")
    parser.add_argument("--score-threshold", type=float, default=None)
    parser.add_argument("--poll-interval-ms", type=float, default=None)
    parser.add_argument("--max-requests", type=int, default=None,
                        help="exit after answering this many requests")
    args = parser.parse_args(argv)

    logging.basicConfig(level="INFO")
    if args.config:
        config = load_adapter_config(args.config)
    else:
        config = AdapterConfig(exchange_dir=args.exchange)
    overrides = {}
    if args.model is not None:
        overrides["model"] = args.model
    if args.score_threshold is not None:
        overrides["score_threshold"] = args.score_threshold
    if args.poll_interval_ms is not None:
        overrides["poll_interval_ms"] = args.poll_interval_ms
    if overrides:
        import dataclasses
        config = dataclasses.replace(config, **overrides)

    try:
        answered = serve(args.exchange, config, max_requests=args.max_requests)
    except ModelLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"answered {answered} requests")
    return 0


if __name__ == "__main__":
    sys.exit(main())
