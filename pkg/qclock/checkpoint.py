"""
Search checkpoint management for qclock.

Handles the append-only JSON-lines file a random-restart search writes
after every finished restart, and resuming from it.
"""

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


logger = logging.getLogger(__name__)

HEADER_KIND = "header"
RECORD_KIND = "restart"


class CheckpointError(Exception):
    """Raised when a checkpoint is corrupt or belongs to a different search."""
    pass


@dataclass
class CheckpointLog:
    """
    One search's checkpoint file.

    The first line is a header carrying the search's config hash; every
    further line is one finished restart record.
    """
    path: Path

    def _ensure_dir(self) -> None:
        """Ensure the checkpoint directory exists."""
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def read(self) -> tuple:
        """
        Parse the checkpoint.

        Returns:
            (header dict or None, list of restart records)

        Raises:
            CheckpointError: On a line that is not valid JSON, with its line
                number and byte offset.
        """
        if not self.path.exists():
            return None, []

        header: Optional[dict] = None
        records = []
        offset = 0
        with open(self.path, "rb") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if line:
                    try:
                        entry = json.loads(line)
                    except (json.JSONDecodeError, UnicodeDecodeError) as e:
                        raise CheckpointError(
                            f"corrupt checkpoint {self.path}: line {lineno} "
                            f"(byte offset {offset}) is not valid JSON"
                        ) from e
                    if not isinstance(entry, dict):
                        raise CheckpointError(
                            f"corrupt checkpoint {self.path}: line {lineno} "
                            f"(byte offset {offset}) is not an object"
                        )
                    if entry.get("kind") == HEADER_KIND:
                        header = entry
                    else:
                        records.append(entry["record"] if "record" in entry else entry)
                offset += len(raw)
        return header, records

    def resume(self, config_hash: str, meta: Optional[dict] = None) -> list:
        """
        Open the checkpoint for a search, returning the restarts it already holds.

        A missing or empty file is started with a header. An existing file
        must carry the same config hash.

        Raises:
            CheckpointError: If the file is corrupt or was written by a search
                with different settings.
        """
        header, records = self.read()
        if header is None:
            if records:
                raise CheckpointError(f"corrupt checkpoint {self.path}: header line missing")
            self._ensure_dir()
            entry = {"kind": HEADER_KIND, "config_hash": config_hash, **(meta or {})}
            self.path.write_text(json.dumps(entry, sort_keys=True) + "\n")
            return []

        if header.get("config_hash") != config_hash:
            raise CheckpointError(
                f"checkpoint {self.path} belongs to a different search "
                f"(config hash {header.get('config_hash')}, expected {config_hash})"
            )
        logger.debug("checkpoint %s: %d restarts recorded", self.path, len(records))
        return records

    def append(self, record: dict) -> None:
        """Append one finished restart and flush it to disk."""
        line = json.dumps({"kind": RECORD_KIND, "record": record}, sort_keys=True)
        with open(self.path, "a") as f:
            f.write(line + "\n")
            f.flush()
            os.fsync(f.fileno())
