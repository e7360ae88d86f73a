"""``finq ingest | query | serve``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from finq.engine import Engine, EngineConfig
from finq.errors import FinqError, ValidationError
from finq.retrieval import FusionMethod, SearchMode

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="finq", description="Hybrid keyword + semantic search over a document corpus.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ingest = sub.add_parser("ingest", help="run the indexing pipelines once")
    ingest.add_argument("--config", required=True)
    ingest.add_argument("--format", choices=("text", "json"), default="text")

    query = sub.add_parser("query", help="search the current snapshot")
    query.add_argument("text")
    query.add_argument("--config", required=True)
    query.add_argument("--mode", choices=[m.value for m in SearchMode], default=SearchMode.AUTO.value)
    query.add_argument("--k", type=int, default=None)
    query.add_argument("--alpha", type=float, default=None)
    query.add_argument("--fusion", choices=[f.value for f in FusionMethod], default=None)
    query.add_argument("--no-rerank", action="store_true")
    query.add_argument("--format", choices=("text", "json"), default="text")

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--config", required=True)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=None)
    return parser


def query_request(args: argparse.Namespace) -> dict:
    request = {"text": args.text, "mode": args.mode}
    if args.k is not None:
        request["k"] = args.k
    if args.alpha is not None:
        request["alpha"] = args.alpha
    if args.fusion is not None:
        request["fusion"] = args.fusion
    if args.no_rerank:
        request["rerank"] = False
    return request


def render_text(payload: dict) -> str:
    lines = [f"mode: {payload['resolved_mode']}  results: {len(payload['results'])}"]
    for r in payload["results"]:
        lines.append(f"{r['rank']:>3}  {r['fused_score']:.4f}  {r['object_id']}")
        lines.append(f"     {r['snippet']}")
        if r["entities"]:
            tags = ", ".join(f"{e['surface']} ({e['entity_type']})" for e in r["entities"])
            lines.append(f"     entities: {tags}")
    return "\n".join(lines)


def _cmd_ingest(args) -> int:
    engine = Engine.from_config_file(args.config)
    try:
        report = engine.ingest()
    finally:
        engine.close()
    counts = report.counts()
    if args.format == "json":
        print(json.dumps({"counts": counts, "failures": report.failures(), "notices": report.notices}, indent=2))
    else:
        print(" ".join(f"{k}={v}" for k, v in counts.items()))
        for failure in report.failures():
            print(f"failed [{failure['stage']}/{failure['code']}] {failure['object_id']}: {failure['message']}")
        for notice in report.notices:
            print(f"notice: {notice}")
    return EXIT_OK


def _cmd_query(args) -> int:
    config = EngineConfig.load(args.config)
    if not config.snapshot.exists():
        raise FinqError(f"no snapshot at {config.snapshot}; run `finq ingest` first", stage="index", code="NoSnapshot")
    engine = Engine(config)
    payload = engine.query(query_request(args))
    if args.format == "json":
        print(json.dumps(payload, ensure_ascii=False))
    else:
        print(render_text(payload))
    return EXIT_OK


def _cmd_serve(args) -> int:
    from finq.server import serve

    config = EngineConfig.load(args.config)
    if not config.snapshot.exists():
        logger.warning("no snapshot at %s; starting with an empty index", config.snapshot)
    serve(Engine(config), host=args.host, port=args.port)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handler = {"ingest": _cmd_ingest, "query": _cmd_query, "serve": _cmd_serve}[args.command]
    try:
        return handler(args)
    except ValidationError as exc:
        print(f"error [{exc.stage}/{exc.code}]: {exc.message}", file=sys.stderr)
        return EXIT_USAGE
    except FinqError as exc:
        print(f"error [{exc.stage}/{exc.code}]: {exc.message}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error [engine/{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
