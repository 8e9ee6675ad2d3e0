"""Rewrite (or, with --check, verify) the golden file from the in-repo oracles."""
import argparse
import sys

from cinetransfer.oracles.goldens import GoldenMismatch, regenerate_goldens


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--check", action="store_true", help="compare instead of writing")
    ap.add_argument("--only", nargs="*", default=None, help="case ids to rebuild")
    args = ap.parse_args()
    try:
        cases = regenerate_goldens(check=args.check, ids=args.only)
    except GoldenMismatch as exc:
        print(exc, file=sys.stderr)
        return 1
    print(f"{'checked' if args.check else 'wrote'} {len(cases)} golden cases")
    return 0


if __name__ == "__main__":
    sys.exit(main())
