"""Command-line front end: export, verify.

Exit codes: 0 success (verify: file is clean), 1 usage error, 2 export or
corruption error (verify: file is not clean).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .encoders import DEFAULT_ENCODER
from .errors import ExportError
from .export import ExportSpec, export_store
from .fdcg import verify_store


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; surface the message instead so main() owns
    # the exit code.
    def error(self, message):
        raise UsageError(message)


def _read_names(path: str) -> list[str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read name list {path}: {exc}") from exc
    names = [line.strip() for line in text.splitlines()]
    return [n for n in names if n and not n.startswith("#")]


def build_parser() -> _Parser:
    parser = _Parser(prog="embed-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser("export", help="encode a dataset tree into a store file")
    exp.add_argument("--root", required=True, help="dataset root (domain/class/image layout)")
    exp.add_argument("--out", required=True, help="output store path")
    exp.add_argument("--classes", required=True,
                     help="file with one class name per line")
    exp.add_argument("--domains", required=True,
                     help="file with one domain name per line")
    exp.add_argument("--encoder", default=DEFAULT_ENCODER,
                     help="encoder identifier (use 'hashed-projection' offline)")
    exp.add_argument("--l-tok", type=int, default=4,
                     help="token rows per class name (truncate or zero-pad)")
    exp.add_argument("--dim", type=int, default=None,
                     help="feature width for the offline encoder")
    exp.add_argument("--token-dim", type=int, default=None,
                     help="token width for the offline encoder")
    exp.add_argument("--device", default="cpu", help="device hint for real backends")

    ver = sub.add_parser("verify", help="re-read a store file and check every invariant")
    ver.add_argument("path")
    return parser


def cmd_export(args) -> int:
    spec = ExportSpec(
        root=args.root,
        classes=_read_names(args.classes),
        domains=_read_names(args.domains),
        out=args.out,
        encoder=args.encoder,
        l_tok=args.l_tok,
        device=args.device,
        dim=args.dim,
        token_dim=args.token_dim,
    )
    result = export_store(spec)
    print(f"wrote {result.path} ({result.num_images} images)")
    return 0


def cmd_verify(args) -> int:
    report = verify_store(args.path)
    for line in report.lines():
        print(line)
    return 0 if report.clean else 2


_COMMANDS = {"export": cmd_export, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
