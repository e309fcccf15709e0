"""Append-only journal with snapshot compaction.

Write path: entries are canonical-encoded, newline-terminated, appended and
flushed in one call, BEFORE the caller acknowledges anything. Recovery
loads the snapshot (if one exists) and replays the journal in order; a torn
final line, the signature of a crash mid-write, is discarded. A torn line
anywhere else means real corruption and recovery refuses to guess.
"""

from __future__ import annotations

import os
from pathlib import Path

from .canon import canonical_decode, canonical_encode
from .errors import DuopayError, MalformedInput

JOURNAL_FILE = "journal.log"
SNAPSHOT_FILE = "snapshot.cdn"


class Journal:
    def __init__(self, directory: str | Path, fsync: bool = True):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._journal_path = self.directory / JOURNAL_FILE
        self._snapshot_path = self.directory / SNAPSHOT_FILE
        self._fh = open(self._journal_path, "ab")

    # --- write side -----------------------------------------------------

    def append(self, entry: dict) -> None:
        self.append_many([entry])

    def append_many(self, entries: list[dict]) -> None:
        if not entries:
            return
        buf = bytearray()
        for entry in entries:
            buf += canonical_encode(entry)
            buf += b"\n"
        self._fh.write(buf)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def write_snapshot(self, state: dict) -> None:
        """Atomically replace the snapshot, then truncate the journal."""
        tmp = self._snapshot_path.with_suffix(".tmp")
        with open(tmp, "wb") as fh:
            fh.write(canonical_encode(state) + b"\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self._snapshot_path)
        self._fh.truncate(0)
        self._fh.seek(0)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    # --- read side ------------------------------------------------------

    def load_snapshot(self) -> dict | None:
        if not self._snapshot_path.exists():
            return None
        raw = self._snapshot_path.read_bytes().rstrip(b"\n")
        state = canonical_decode(raw)
        if not isinstance(state, dict):
            raise MalformedInput("snapshot must hold a map")
        return state

    def replay(self) -> list[dict]:
        """Entries since the snapshot, oldest first, torn tail dropped."""
        raw = self._journal_path.read_bytes()
        entries: list[dict] = []
        lines = raw.split(b"\n")
        torn = lines.pop()  # bytes after the last newline; b"" when clean
        for i, line in enumerate(lines):
            try:
                entry = canonical_decode(line)
            except DuopayError:
                if i == len(lines) - 1 and not torn:
                    # final line broken mid-write: crash artifact, drop it
                    return entries
                raise MalformedInput("corrupt journal entry at line %d" % (i + 1))
            if not isinstance(entry, dict):
                raise MalformedInput("journal entry must be a map")
            entries.append(entry)
        return entries

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "Journal":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
