import pytest

from duopay.errors import MalformedInput
from duopay.journal import JOURNAL_FILE, Journal


def test_append_and_replay(tmp_path):
    with Journal(tmp_path, fsync=False) as j:
        j.append({"op": "a", "n": 1})
        j.append_many([{"op": "b", "n": 2}, {"op": "c", "n": 3}])
    with Journal(tmp_path, fsync=False) as j:
        assert j.replay() == [
            {"op": "a", "n": 1},
            {"op": "b", "n": 2},
            {"op": "c", "n": 3},
        ]


def test_snapshot_truncates_journal(tmp_path):
    with Journal(tmp_path, fsync=False) as j:
        j.append({"op": "a", "n": 1})
        j.write_snapshot({"state": 1})
        j.append({"op": "b", "n": 2})
    with Journal(tmp_path, fsync=False) as j:
        assert j.load_snapshot() == {"state": 1}
        assert j.replay() == [{"op": "b", "n": 2}]


def test_torn_tail_dropped(tmp_path):
    with Journal(tmp_path, fsync=False) as j:
        j.append({"op": "a", "n": 1})
        j.append({"op": "b", "n": 2})
    path = tmp_path / JOURNAL_FILE
    data = path.read_bytes()
    path.write_bytes(data[:-4])  # cut into the final line
    with Journal(tmp_path, fsync=False) as j:
        assert j.replay() == [{"op": "a", "n": 1}]


def test_mid_file_corruption_raises(tmp_path):
    with Journal(tmp_path, fsync=False) as j:
        j.append({"op": "a", "n": 1})
        j.append({"op": "b", "n": 2})
    path = tmp_path / JOURNAL_FILE
    lines = path.read_bytes().split(b"\n")
    lines[0] = lines[0][:-2] + b"!!"
    path.write_bytes(b"\n".join(lines))
    with Journal(tmp_path, fsync=False) as j:
        with pytest.raises(MalformedInput):
            j.replay()


def test_append_after_reopen_continues(tmp_path):
    with Journal(tmp_path, fsync=False) as j:
        j.append({"op": "a", "n": 1})
    with Journal(tmp_path, fsync=False) as j:
        j.append({"op": "b", "n": 2})
        assert [e["op"] for e in j.replay()] == ["a", "b"]
