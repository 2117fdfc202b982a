import os

import pytest

from taintforest.r2 import (
    ALLOWED_COMMANDS,
    CommandNotAllowed,
    R2Session,
    R2View,
    SessionDead,
    SpawnError,
    Transcript,
    TranscriptSession,
    check_allowed,
    r2_executable,
    r2_open,
)

from conftest import FIXTURE_DIR

TRANSCRIPT_PATH = os.path.join(FIXTURE_DIR, "fixture.r2transcript.jsonl")
BINARY_PATH = os.path.join(FIXTURE_DIR, "fixture")

REPLAY_SEQUENCE = ["aaa", "afl", "ii", "izz", "iI", "axt @ sym.imp.getenv", "pdf @ main"]

r2_missing = r2_executable() is None


def test_transcript_replay_is_byte_identical():
    first = TranscriptSession.from_file(TRANSCRIPT_PATH)
    second = TranscriptSession.from_file(TRANSCRIPT_PATH)
    outputs_a = [first.cmd(c) for c in REPLAY_SEQUENCE]
    outputs_b = [second.cmd(c) for c in REPLAY_SEQUENCE]
    assert outputs_a == outputs_b
    joined = "\x00".join(outputs_a).encode()
    assert joined == "\x00".join(outputs_b).encode()


def test_transcript_replay_tolerates_reordering():
    session = TranscriptSession.from_file(TRANSCRIPT_PATH)
    out_of_order = ["afl", "aaa", "afl", "ii"]
    outputs = [session.cmd(c) for c in out_of_order]
    assert "main" in outputs[0]
    assert outputs[0] == outputs[2]


def test_transcript_missing_command_is_session_error():
    session = TranscriptSession.from_file(TRANSCRIPT_PATH)
    with pytest.raises(SessionDead):
        session.cmd("izj")


def test_closed_transcript_session():
    session = TranscriptSession.from_file(TRANSCRIPT_PATH)
    session.close()
    with pytest.raises(SessionDead):
        session.cmd("afl")


def test_allow_list():
    for command in ALLOWED_COMMANDS:
        check_allowed(f"{command} @ main", allow_free=False)
    with pytest.raises(CommandNotAllowed):
        check_allowed("px 32", allow_free=False)
    check_allowed("px 32", allow_free=True)
    session = TranscriptSession(Transcript([{"command": "afl", "output": "x"}]), allow_free=False)
    with pytest.raises(CommandNotAllowed):
        session.cmd("wx 90")


def test_transcript_save_load_roundtrip(tmp_path):
    transcript = Transcript([{"command": "afl", "output": "line1\nline2"}])
    path = tmp_path / "t.jsonl"
    transcript.save(str(path))
    back = Transcript.load(str(path))
    assert back.pairs == transcript.pairs


def test_r2_view_parses_transcript_fixture():
    view = R2View(TranscriptSession.from_file(TRANSCRIPT_PATH), path_label=BINARY_PATH)
    functions = dict(view.functions())
    assert "main" in functions
    assert functions["main"] == 0x1189
    assert "getenv" in view.imports()
    callers = view.callers_of("getenv")
    assert callers and callers[0][0] == "main"
    assert "DEV_NAME" in view.strings()


def test_spawn_error_on_missing_binary():
    if r2_missing:
        with pytest.raises(SpawnError):
            R2Session(BINARY_PATH)
    with pytest.raises(SpawnError):
        R2Session(BINARY_PATH + ".does-not-exist")


def test_r2_open_replay_mode():
    session = r2_open(BINARY_PATH, transcript_path=TRANSCRIPT_PATH, replay=True)
    assert "main" in session.cmd("afl")
    with pytest.raises(ValueError):
        r2_open(BINARY_PATH, replay=True)


@pytest.mark.skipif(r2_missing, reason="radare2 not installed")
def test_live_r2_lists_functions_and_transcript_reproduces():
    session = r2_open(BINARY_PATH)
    try:
        session.cmd("aaa")
        afl = session.cmd("afl")
        assert len(afl.strip().splitlines()) >= 1
        recorded = session.transcript
    finally:
        session.close()
    replay = TranscriptSession(recorded)
    assert replay.cmd("aaa") == recorded.pairs[0]["output"]
    assert replay.cmd("afl") == afl


@pytest.mark.skipif(r2_missing, reason="radare2 not installed")
def test_live_r2_dead_session():
    session = r2_open(BINARY_PATH)
    session.close()
    with pytest.raises(SessionDead):
        session.cmd("afl")
