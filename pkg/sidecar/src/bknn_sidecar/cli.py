"""Command-line entry point for the exporters."""

from __future__ import annotations

import argparse
import sys

from .exports import export_embeddings, export_lm_predictions, export_query_embeddings
from .extract import SidecarConfig


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model name or local path")
    p.add_argument("--layer", type=int, default=11,
                   help="hidden layer to read the mask embedding from")
    p.add_argument("--batch-size", type=int, default=16, help="sequences per batch")
    p.add_argument("--max-length", type=int, default=128,
                   help="max sequence length; longer inputs keep a symmetric "
                        "window around the mask")
    p.add_argument("--mask-token", help="mask surface (default: the tokenizer's)")


def _config(args) -> SidecarConfig:
    return SidecarConfig(model=args.model, layer=args.layer,
                         batch_size=args.batch_size, max_length=args.max_length,
                         mask_token=args.mask_token)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bknn-sidecar",
        description="Export transformer artifacts in the bknn exchange formats.")
    sub = parser.add_subparsers(dest="command", metavar="<command>")

    p = sub.add_parser("export-embeddings",
                       help="embed every corpus occurrence into a datastore file")
    p.add_argument("--corpus", required=True, help="corpus store directory")
    p.add_argument("--out", required=True, help="output datastore file")
    _add_model_flags(p)

    p = sub.add_parser("export-query-embeddings",
                       help="embed query mask positions into an exchange file")
    p.add_argument("--queries", required=True,
                   help="JSON-lines of {query_id, masked_text}")
    p.add_argument("--out", required=True, help="output exchange file")
    _add_model_flags(p)

    p = sub.add_parser("export-lm",
                       help="write per-query candidate probabilities")
    p.add_argument("--queries", required=True,
                   help="JSON-lines of {query_id, masked_text}")
    p.add_argument("--candidates", required=True,
                   help="candidate vocabulary, one token per line")
    p.add_argument("--out", required=True, help="output predictions JSON-lines")
    p.add_argument("--report", help="write flag/count summary JSON here")
    _add_model_flags(p)

    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 1
    if args.command == "export-embeddings":
        manifest = export_embeddings(args.corpus, _config(args), args.out)
        print(f"exported {manifest['record_count']} records "
              f"({manifest['skipped_occurrences']} skipped of "
              f"{manifest['total_occurrences']}), layer_tag "
              f"{manifest['embedder']['layer_tag']!r} -> {args.out}")
    elif args.command == "export-query-embeddings":
        manifest = export_query_embeddings(args.queries, _config(args), args.out)
        print(f"exported {manifest['record_count']} query embeddings "
              f"({len(manifest['flagged_queries'])} flagged) -> {args.out}")
    else:
        report = export_lm_predictions(args.queries, args.candidates,
                                       _config(args), args.out, args.report)
        print(f"wrote {report['emitted']} prediction rows "
              f"({len(report['flagged_queries'])} queries flagged, "
              f"{len(report['flagged_candidates'])} candidates flagged) "
              f"-> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
