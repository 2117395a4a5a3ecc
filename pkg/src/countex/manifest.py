"""Run manifests: what a command produced and the checksums to prove it."""

from __future__ import annotations

import hashlib
import os
import time
from pathlib import Path

from . import jsonio


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, command: str, seed: int, config_path: str | None, files: list[str]) -> Path:
    """Checksum the emitted files and write `manifest.json` atomically.

    File paths are stored relative to the output directory; the timestamp is
    the only field expected to differ between identical reruns.
    """
    out = Path(out_dir)
    entries = {}
    for name in sorted(files):
        entries[name] = sha256_file(out / name)
    payload = {
        "command": command,
        "seed": seed,
        "config_path": config_path,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "files": entries,
    }
    target = out / "manifest.json"
    tmp = out / ".manifest.json.tmp"
    jsonio.write_file(tmp, payload)
    os.replace(tmp, target)
    return target
