"""radare2 pipe adapter with replayable transcripts.

A live session spawns radare2 in quiet pipe mode (``-q0``): commands are
written line-wise and output is read up to the NUL delimiter the pipe mode
emits after every command. Every (command, output) pair is appended to a
transcript, and a transcript can later stand in for radare2 entirely —
replayed sessions reproduce recorded outputs byte-exactly.
"""

from __future__ import annotations

import json
import os
import re
import select
import shutil
import subprocess
import threading

DEFAULT_COMMAND_TIMEOUT_S = 30.0

# Commands agents may issue; everything else needs the allow_free escape hatch.
ALLOWED_COMMANDS = ("aaa", "afl", "pdf", "pdc", "axt", "izz", "iI", "ii", "s")


class R2Error(Exception):
    pass


class SpawnError(R2Error):
    pass


class SessionDead(R2Error):
    pass


class CommandTimeout(R2Error):
    pass


class CommandNotAllowed(R2Error):
    pass


def r2_executable() -> str | None:
    for name in ("r2", "radare2"):
        path = shutil.which(name)
        if path:
            return path
    return None


def check_allowed(command: str, allow_free: bool) -> None:
    if allow_free:
        return
    head = command.strip().split()[0] if command.strip() else ""
    if head not in ALLOWED_COMMANDS:
        raise CommandNotAllowed(f"command {head!r} is not on the allow-list {ALLOWED_COMMANDS}")


class Transcript:
    """Ordered (command, output) pairs; JSON lines on disk."""

    def __init__(self, pairs: list[dict] | None = None):
        self.pairs: list[dict] = list(pairs or [])

    def record(self, command: str, output: str) -> None:
        self.pairs.append({"command": command, "output": output})

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for pair in self.pairs:
                handle.write(json.dumps(pair, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str) -> "Transcript":
        pairs = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    pairs.append(json.loads(line))
        return cls(pairs)


class R2Session:
    """Live radare2 process in quiet pipe mode."""

    def __init__(
        self,
        binary_path: str,
        *,
        timeout_s: float = DEFAULT_COMMAND_TIMEOUT_S,
        allow_free: bool = False,
        transcript: Transcript | None = None,
    ):
        if not os.path.exists(binary_path):
            raise SpawnError(f"binary not found: {binary_path}")
        executable = r2_executable()
        if executable is None:
            raise SpawnError("radare2 is not installed")
        self.binary_path = binary_path
        self.executable = executable
        self.timeout_s = timeout_s
        self.allow_free = allow_free
        self.transcript = transcript if transcript is not None else Transcript()
        self._lock = threading.Lock()
        self._proc: subprocess.Popen | None = None
        self._spawn()

    def _spawn(self) -> None:
        try:
            self._proc = subprocess.Popen(
                [self.executable, "-q0", "-2", self.binary_path],
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
            )
        except OSError as exc:
            raise SpawnError(f"failed to spawn radare2: {exc}") from None
        # quiet pipe mode announces readiness with a NUL byte
        self._read_until_nul()

    def _read_until_nul(self) -> str:
        assert self._proc is not None and self._proc.stdout is not None
        fd = self._proc.stdout.fileno()
        chunks: list[bytes] = []
        deadline = self.timeout_s
        import time

        end = time.monotonic() + deadline
        while True:
            remaining = end - time.monotonic()
            if remaining <= 0:
                self._restart()
                raise CommandTimeout(f"radare2 command timed out after {self.timeout_s}s")
            readable, _, _ = select.select([fd], [], [], remaining)
            if not readable:
                continue
            chunk = os.read(fd, 65536)
            if not chunk:
                raise SessionDead("radare2 process closed its output")
            if b"\x00" in chunk:
                head, _, _rest = chunk.partition(b"\x00")
                chunks.append(head)
                return b"".join(chunks).decode("utf-8", errors="replace")
            chunks.append(chunk)

    def _restart(self) -> None:
        if self._proc is not None:
            self._proc.kill()
            self._proc.wait()
        self._spawn()

    def cmd(self, command: str) -> str:
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                raise SessionDead("radare2 session is closed")
            check_allowed(command, self.allow_free)
            assert self._proc.stdin is not None
            try:
                self._proc.stdin.write(command.encode("utf-8") + b"\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise SessionDead(f"radare2 pipe broken: {exc}") from None
            output = self._read_until_nul()
            self.transcript.record(command, output)
            return output

    def close(self) -> None:
        with self._lock:
            if self._proc is not None:
                try:
                    if self._proc.stdin is not None:
                        self._proc.stdin.close()
                finally:
                    self._proc.kill()
                    self._proc.wait()
                    self._proc = None

    def __enter__(self) -> "R2Session":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class TranscriptSession:
    """Serves recorded outputs without radare2.

    Lookup prefers the next occurrence of the command at or after the cursor
    (exact sequential replay) and falls back to the first occurrence anywhere,
    so out-of-order re-queries of recorded commands still succeed.
    """

    def __init__(self, transcript: Transcript, *, allow_free: bool = True):
        self.transcript = transcript
        self.allow_free = allow_free
        self._cursor = 0
        self._lock = threading.Lock()
        self._closed = False

    @classmethod
    def from_file(cls, path: str, **kwargs) -> "TranscriptSession":
        return cls(Transcript.load(path), **kwargs)

    def cmd(self, command: str) -> str:
        with self._lock:
            if self._closed:
                raise SessionDead("transcript session is closed")
            check_allowed(command, self.allow_free)
            pairs = self.transcript.pairs
            for index in range(self._cursor, len(pairs)):
                if pairs[index]["command"] == command:
                    self._cursor = index + 1
                    return pairs[index]["output"]
            for index in range(len(pairs)):
                if pairs[index]["command"] == command:
                    return pairs[index]["output"]
            raise SessionDead(f"command {command!r} not present in transcript")

    def close(self) -> None:
        with self._lock:
            self._closed = True


def r2_open(
    binary_path: str,
    *,
    transcript_path: str | None = None,
    replay: bool = False,
    timeout_s: float = DEFAULT_COMMAND_TIMEOUT_S,
    allow_free: bool = False,
):
    """Open a live session, or a replay session when ``replay`` is set."""
    if replay:
        if not transcript_path:
            raise ValueError("replay requires a transcript path")
        return TranscriptSession.from_file(transcript_path, allow_free=allow_free)
    transcript = Transcript()
    return R2Session(
        binary_path, timeout_s=timeout_s, allow_free=allow_free, transcript=transcript
    )


def r2_cmd(session, command: str) -> str:
    return session.cmd(command)


# --- parsing the handful of outputs the pipeline needs -----------------------

_AFL_RE = re.compile(r"^(0x[0-9a-fA-F]+)\s+\d+\s+\d+\s+(.+?)\s*$")
_XREF_RE = re.compile(r"^(\S+)\s+(0x[0-9a-fA-F]+)\s+\[")


class R2View:
    """Binary-view interface over a radare2 session (live or transcript)."""

    kind = "radare2"

    def __init__(self, session, path_label: str, analyze: bool = True):
        self.session = session
        self.path_label = path_label
        if analyze:
            self.session.cmd("aaa")

    def functions(self) -> list[tuple[str, int]]:
        rows = []
        for line in self.session.cmd("afl").splitlines():
            match = _AFL_RE.match(line.strip())
            if match:
                rows.append((match.group(2).strip(), int(match.group(1), 16)))
        return rows

    def imports(self) -> list[str]:
        names = []
        for line in self.session.cmd("ii").splitlines():
            parts = line.split()
            if len(parts) >= 2 and parts[0].isdigit():
                names.append(parts[-1])
        return names

    def callers_of(self, symbol: str) -> list[tuple[str, int]]:
        """Functions containing call xrefs to a symbol, via axt."""
        rows = []
        output = self.session.cmd(f"axt @ sym.imp.{symbol}")
        for line in output.splitlines():
            match = _XREF_RE.match(line.strip())
            if match:
                rows.append((match.group(1), int(match.group(2), 16)))
        return rows

    def strings(self) -> str:
        return self.session.cmd("izz")
