"""Versioned binary artifact files (models, index caches).

Every artifact is a single pickle holding a header (kind + format version)
plus a payload dict. Loading checks both so stale or foreign files fail fast
instead of mis-deserializing.
"""

from __future__ import annotations

import pickle

FORMAT_VERSION = 1
# protocol pinned so identical payloads serialize to identical bytes
_PICKLE_PROTOCOL = 4


class ArtifactError(ValueError):
    pass


def save_artifact(path, kind: str, payload: dict) -> None:
    blob = {"kind": kind, "format_version": FORMAT_VERSION, "payload": payload}
    with open(path, "wb") as fh:
        pickle.dump(blob, fh, protocol=_PICKLE_PROTOCOL)


def load_artifact(path, kind: str) -> dict:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if not isinstance(blob, dict) or "kind" not in blob:
        raise ArtifactError(f"{path}: not a recognized artifact file")
    if blob["kind"] != kind:
        raise ArtifactError(f"{path}: expected {kind!r} artifact, found {blob['kind']!r}")
    if blob.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(
            f"{path}: format-version mismatch "
            f"(file {blob.get('format_version')!r}, supported {FORMAT_VERSION})"
        )
    return blob["payload"]


def check_vocab_hash(expected: str, actual: str, what: str) -> None:
    if expected != actual:
        raise ArtifactError(
            f"vocabulary-hash mismatch for {what}: "
            f"model was trained against a different vocabulary"
        )
