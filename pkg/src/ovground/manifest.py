"""Run manifests: each CLI run records exactly what it did and from what.

The manifest lands in the output directory before any other artifact, so
even an aborted run leaves a record of its resolved configuration. On
success it is rewritten in place with the wall-clock duration, the output
listing, and content hashes of the dataset files involved, which is enough
to re-run the command and compare outputs byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

MANIFEST_NAME = "manifest.json"


def blob_hash(path: str) -> str:
    """Content hash in git's blob form: sha1("blob <size>\\0" + bytes)."""
    data = open(path, "rb").read()
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def hash_tree(dir_path: str, suffixes: tuple[str, ...] = (".jsonl", ".json", ".bin")
              ) -> dict[str, str]:
    """name -> blob hash for every matching file directly under dir_path."""
    out: dict[str, str] = {}
    for name in sorted(os.listdir(dir_path)):
        full = os.path.join(dir_path, name)
        if os.path.isfile(full) and name.endswith(suffixes) and name != MANIFEST_NAME:
            out[name] = blob_hash(full)
    return out


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    dataset_hash: dict[str, str] = field(default_factory=dict)
    duration_s: float | None = None

    def write(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        return cls(**payload)
