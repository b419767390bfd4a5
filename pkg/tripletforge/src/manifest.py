from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from tripletforge.src.core import ParseError

LOGGER = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"
TOOL_NAME = "tripletforge"
_CHUNK = 1 << 20


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        while chunk := handle.read(_CHUNK):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + MANIFEST_SUFFIX)


def build_manifest(
    *,
    version: str,
    subcommand: str,
    seed: int,
    config: Mapping[str, Any],
    inputs: Mapping[str, str | Path],
    outputs: Sequence[str | Path],
) -> dict[str, Any]:
    """Describe one run: what produced the outputs and from which exact inputs.

    No timestamps or host details are recorded, so two runs with the same
    inputs, config and seed write byte-identical manifests.
    """
    return {
        "tool": TOOL_NAME,
        "version": version,
        "subcommand": subcommand,
        "seed": seed,
        "config": dict(config),
        "inputs": {
            role: {"path": str(path), "sha256": file_sha256(path)}
            for role, path in sorted(inputs.items())
        },
        "outputs": {str(path): file_sha256(path) for path in outputs},
    }


def write_manifests(manifest: Mapping[str, Any], outputs: Sequence[str | Path]) -> list[Path]:
    """Write the manifest beside every output; returns the manifest paths."""
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    written: list[Path] = []
    for output in outputs:
        target = manifest_path(output)
        target.write_text(text, encoding="utf-8")
        written.append(target)
    LOGGER.debug("Wrote %d run manifests", len(written))
    return written


def load_manifest(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError("manifest", str(path), exc.msg, line=exc.lineno) from exc
    if not isinstance(data, dict) or data.get("tool") != TOOL_NAME:
        raise ParseError("manifest", str(path), f"not a {TOOL_NAME} run manifest", line=1)
    for key in ("inputs", "outputs"):
        if not isinstance(data.get(key), dict):
            raise ParseError("manifest", str(path), f"missing {key!r} table", line=1)
    return data


def verify_manifest(path: str | Path) -> list[str]:
    """Re-hash every input and output a manifest lists; returns drift messages."""
    data = load_manifest(path)
    problems: list[str] = []
    expected: list[tuple[str, str]] = [
        (entry["path"], entry["sha256"]) for entry in data["inputs"].values()
    ]
    expected.extend(data["outputs"].items())
    for file_path, digest in expected:
        target = Path(file_path)
        if not target.exists():
            problems.append(f"{path}: {file_path} is missing")
            continue
        actual = file_sha256(target)
        if actual != digest:
            problems.append(f"{path}: {file_path} hash drifted ({digest[:12]} != {actual[:12]})")
    return problems
