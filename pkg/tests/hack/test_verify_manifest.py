from __future__ import annotations

import importlib.util
from pathlib import Path

import pytest

from tripletforge.src.manifest import build_manifest, write_manifests


def _load_module() -> object:
    module_path = Path(__file__).resolve().parents[2] / "hack" / "verify_manifest.py"
    spec = importlib.util.spec_from_file_location("verify_manifest", module_path)
    if spec is None or spec.loader is None:
        raise RuntimeError("Unable to load verify_manifest module")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def _write_run(tmp_path: Path) -> tuple[Path, Path]:
    source = tmp_path / "train.jsonl"
    source.write_text('{"image_id": 0}\n', encoding="utf-8")
    output = tmp_path / "out" / "sampler.json"
    output.parent.mkdir()
    output.write_text("{}\n", encoding="utf-8")
    manifest = build_manifest(
        version="0.1.0",
        subcommand="build-sampler",
        seed=0,
        config={},
        inputs={"annotations": source},
        outputs=[output],
    )
    write_manifests(manifest, [output])
    return source, output


def test_verify_manifest_passes_for_untouched_run(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    module = _load_module()
    _write_run(tmp_path)

    code = module.main([str(tmp_path / "out")])  # type: ignore[attr-defined]

    assert code == 0
    assert "passed" in capsys.readouterr().out


def test_verify_manifest_reports_changed_output(
    tmp_path: Path, capsys: pytest.CaptureFixture[str]
) -> None:
    module = _load_module()
    _, output = _write_run(tmp_path)
    output.write_text('{"edited": true}\n', encoding="utf-8")

    code = module.main([str(tmp_path)])  # type: ignore[attr-defined]

    assert code == 1
    assert "sampler.json" in capsys.readouterr().err


def test_verify_manifest_rejects_empty_directory(tmp_path: Path) -> None:
    module = _load_module()

    errors = module._verify([tmp_path])  # type: ignore[attr-defined]

    assert errors == ["no run manifests found"]


def test_verify_manifest_reports_unreadable_manifest(tmp_path: Path) -> None:
    module = _load_module()
    broken = tmp_path / "x.manifest.json"
    broken.write_text("{", encoding="utf-8")

    errors = module._verify([broken])  # type: ignore[attr-defined]

    assert len(errors) == 1
    assert errors[0].startswith(str(broken))
