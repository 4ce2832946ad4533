"""export_backbones: one-shot backbone export with optional parity check."""

import argparse
import json
import sys

from .export import EXPORT_NAMES, build_source_model, export
from .torch_export import ExportError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export_backbones",
        description="Export no-top CNN trunks to the interchange format")
    parser.add_argument("--name", required=True,
                        choices=sorted(EXPORT_NAMES) + ["all"])
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--random-init", action="store_true",
                        help="skip pretrained weights (structural export)")
    parser.add_argument("--verify", action="store_true",
                        help="run the parity check after exporting")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    names = sorted(EXPORT_NAMES) if args.name == "all" else [args.name]
    pretrained = not args.random_init
    try:
        for name in names:
            model = build_source_model(
                name, pretrained, float64=(name == "nasnet-mobile"))
            graph_file, manifest_file = export(name, args.out,
                                               pretrained=pretrained,
                                               model=model)
            print(f"{name}: wrote {graph_file} and {manifest_file}")
            if args.verify:
                from .verify import verify
                report = verify(graph_file, manifest_file, model=model,
                                name=name)
                status = "PASS" if report["passed"] else "FAIL"
                print(f"{name}: parity {status} "
                      f"(max abs diff {report['max_abs_diff']:.3e})")
                print(json.dumps(report, indent=2))
                if not report["passed"]:
                    return 1
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
