#!/usr/bin/env python3
from __future__ import annotations

import argparse
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from tripletforge.src.core import ValidationError  # noqa: E402
from tripletforge.src.manifest import MANIFEST_SUFFIX, verify_manifest  # noqa: E402


def _collect_manifests(paths: list[Path]) -> list[Path]:
    manifests: list[Path] = []
    for path in paths:
        if path.is_dir():
            manifests.extend(sorted(path.rglob(f"*{MANIFEST_SUFFIX}")))
        else:
            manifests.append(path)
    return manifests


def _verify(paths: list[Path]) -> list[str]:
    manifests = _collect_manifests(paths)
    if not manifests:
        return ["no run manifests found"]
    errors: list[str] = []
    for manifest in manifests:
        try:
            errors.extend(verify_manifest(manifest))
        except (OSError, ValidationError) as exc:
            errors.append(f"{manifest}: {exc}")
    return errors


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        description="Re-hash the inputs and outputs recorded in run manifests."
    )
    parser.add_argument("paths", nargs="+", type=Path, help="manifest files or directories")
    args = parser.parse_args(argv)

    errors = _verify(args.paths)
    if errors:
        print("Run manifest verification failed:", file=sys.stderr)
        for error in errors:
            print(f"  - {error}", file=sys.stderr)
        return 1

    print("Run manifest verification passed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
