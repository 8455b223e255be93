# src/services/manifest_service.py

import hashlib
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

from pydantic import BaseModel

from src.core.config import TOOL_VERSION
from src.schemas.campaign_schema import CampaignManifest

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
_CHUNK = 1 << 16


def file_digest(path: Path) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(_CHUNK), b""):
            sha.update(block)
    return sha.hexdigest()


def config_digest(config: Optional[BaseModel]) -> Optional[str]:
    """Digest of the canonical JSON form of a configuration model."""
    if config is None:
        return None
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _relative(path: Path, root: Path) -> str:
    """Key of a file in a manifest: its path relative to `root`, with `..` for files outside it."""
    resolved = Path(path).resolve()
    try:
        return Path(os.path.relpath(resolved, root.resolve())).as_posix()
    except ValueError:
        # different drive
        return resolved.as_posix()


def build_manifest(
    command: str,
    out_dir: Path,
    inputs: Iterable[Path] = (),
    outputs: Iterable[Path] = (),
    config: Optional[BaseModel] = None,
) -> CampaignManifest:
    out_dir = Path(out_dir)
    return CampaignManifest(
        command=command,
        tool_version=TOOL_VERSION,
        config_digest=config_digest(config),
        inputs={_relative(p, out_dir): file_digest(p) for p in sorted(set(map(Path, inputs)))},
        outputs={_relative(p, out_dir): file_digest(p) for p in sorted(set(map(Path, outputs)))},
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def manifest_digest(manifest: CampaignManifest) -> str:
    """Digest over everything except the creation time."""
    canonical = json.dumps(manifest.model_dump(mode="json", exclude={"created_at"}),
                           sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def manifest_name(command: str) -> str:
    return f"{command}.{MANIFEST_FILE}"


def write_manifest(
    command: str,
    out_dir: Path,
    inputs: Iterable[Path] = (),
    outputs: Iterable[Path] = (),
    config: Optional[BaseModel] = None,
) -> Path:
    """Record sha256 digests of a command's inputs, outputs and config in `out_dir/<command>.manifest.json`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(command, out_dir, inputs, outputs, config)
    document = {**manifest.model_dump(mode="json"), "digest": manifest_digest(manifest)}

    path = out_dir / manifest_name(command)
    path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Manifest for %s: %d input(s), %d output(s)", command, len(manifest.inputs), len(manifest.outputs))
    return path


def read_manifest(path: Path) -> CampaignManifest:
    document = json.loads(Path(path).read_text(encoding="utf-8"))
    document.pop("digest", None)
    return CampaignManifest.model_validate(document)
