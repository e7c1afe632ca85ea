"""Append-only pseudonym -> status store kept by the CTS.

Log line format::

    seq:<decimal> pid:<lowercase hex, fixed width> status:ok|alarm

Transition table: absent->ok, absent->alarm, ok->alarm and alarm->alarm are
accepted; ok->ok raises AlreadyRegistered and alarm->ok raises AlarmLocked.
"""

from __future__ import annotations

import enum
import hashlib
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

from .errors import AlarmLocked, AlreadyRegistered, CorruptLog
from .numcore import i2osp
from .oprf import Pid


class Status(str, enum.Enum):
    OK = "ok"
    ALARM = "alarm"


@dataclass(frozen=True)
class RegistryRecord:
    pid_encoded: bytes
    status: Status
    seq: int

    def to_line(self) -> str:
        return f"seq:{self.seq} pid:{self.pid_encoded.hex()} status:{self.status.value}\n"


_LINE_RE = re.compile(r"seq:(0|[1-9][0-9]*) pid:((?:[0-9a-f]{2})+) status:(ok|alarm)")


class Registry:
    def __init__(self, pid_width: int | None = None):
        self.pid_width = pid_width
        self._records: list[RegistryRecord] = []
        self._index: dict[bytes, Status] = {}
        self._lock = threading.RLock()
        self._journal: IO[str] | None = None

    # -- queries ---------------------------------------------------------------

    @property
    def records(self) -> tuple[RegistryRecord, ...]:
        with self._lock:
            return tuple(self._records)

    def index(self) -> dict[bytes, Status]:
        with self._lock:
            return dict(self._index)

    def __len__(self) -> int:
        return len(self._records)

    def _encode(self, pid: Pid | int | bytes) -> bytes:
        if isinstance(pid, bytes):
            if self.pid_width is not None and len(pid) != self.pid_width:
                raise ValueError("encoded pid has the wrong width")
            return pid
        if self.pid_width is None:
            raise ValueError("registry pid width is not fixed yet")
        value = pid.value if isinstance(pid, Pid) else pid
        return i2osp(value, self.pid_width)

    def lookup(self, pid: Pid | int | bytes) -> Status | None:
        with self._lock:
            if self.pid_width is None:
                return None
            return self._index.get(self._encode(pid))

    def match_any(self, pids: Iterable[Pid | int | bytes]):
        """First pid (as given) whose latest status is ``ok``, else ``None``."""
        with self._lock:
            for pid in pids:
                if self.lookup(pid) is Status.OK:
                    return pid
        return None

    # -- mutation --------------------------------------------------------------

    def insert(self, pid: Pid | int | bytes, status: Status | str) -> int:
        status = Status(status)
        with self._lock:
            if self.pid_width is None and isinstance(pid, bytes):
                self.pid_width = len(pid)
            encoded = self._encode(pid)
            current = self._index.get(encoded)
            if current is Status.OK and status is Status.OK:
                raise AlreadyRegistered("pseudonym already registered")
            if current is Status.ALARM and status is Status.OK:
                raise AlarmLocked("pseudonym carries an alarm")
            seq = self._records[-1].seq + 1 if self._records else 1
            record = RegistryRecord(encoded, status, seq)
            if self._journal is not None:
                self._journal.write(record.to_line())
                self._journal.flush()
            self._records.append(record)
            self._index[encoded] = status
            return seq

    # -- persistence -----------------------------------------------------------

    def dumps(self) -> str:
        with self._lock:
            return "".join(r.to_line() for r in self._records)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def persist(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str, pid_width: int | None = None) -> "Registry":
        if text and not text.endswith("\n"):
            raise CorruptLog("final record is not newline-terminated")
        reg = cls(pid_width)
        for lineno, line in enumerate(text.split("\n")[:-1] if text else [], 1):
            m = _LINE_RE.fullmatch(line)
            if m is None:
                raise CorruptLog(f"line {lineno}: malformed record")
            seq, pid_hex, status = int(m[1]), m[2], Status(m[3])
            encoded = bytes.fromhex(pid_hex)
            if reg.pid_width is None:
                reg.pid_width = len(encoded)
            elif len(encoded) != reg.pid_width:
                raise CorruptLog(f"line {lineno}: pid width {len(encoded)} != {reg.pid_width}")
            if reg._records and seq <= reg._records[-1].seq:
                raise CorruptLog(f"line {lineno}: sequence number does not increase")
            current = reg._index.get(encoded)
            if status is Status.OK and current is not None:
                raise CorruptLog(f"line {lineno}: illegal transition to ok")
            record = RegistryRecord(encoded, status, seq)
            reg._records.append(record)
            reg._index[encoded] = status
        return reg

    @classmethod
    def load(cls, path: str | Path, pid_width: int | None = None) -> "Registry":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptLog("log is not UTF-8") from exc
        return cls.loads(text, pid_width)

    @classmethod
    def open(cls, path: str | Path, pid_width: int) -> "Registry":
        """Load (or create) a journal file and append every later insert to it."""
        path = Path(path)
        reg = cls.load(path, pid_width) if path.exists() else cls(pid_width)
        reg._journal = path.open("a", encoding="utf-8")
        return reg

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    def summary(self) -> dict:
        with self._lock:
            statuses: Sequence[Status] = list(self._index.values())
            return {
                "records": len(self._records),
                "pids": len(self._index),
                "ok": sum(s is Status.OK for s in statuses),
                "alarm": sum(s is Status.ALARM for s in statuses),
                "digest": self.digest(),
            }


def persist(reg: Registry, path: str | Path) -> None:
    reg.persist(path)


def load(path: str | Path) -> Registry:
    return Registry.load(path)
