# tests/test_journal.py
import pytest

from src.core.errors import CorruptJournal
from src.dispatcher.journal import EventType, Journal, JournalRecord, MemoryJournal, parse_journal


def _records(n):
    return [
        JournalRecord(seq=i + 1, event=EventType.WORKER_REGISTERED, payload={"worker_id": i + 1, "address": f"h:{i}"})
        for i in range(n)
    ]


def _encoded(records):
    return b"".join(r.encode() for r in records)


def test_records_parse_back():
    records = _records(3)
    parsed, valid = parse_journal(_encoded(records))
    assert parsed == records
    assert valid == len(_encoded(records))


def test_torn_tail_is_cut_at_every_offset():
    records = _records(3)
    data = _encoded(records)
    boundaries = [len(_encoded(records[:i])) for i in range(4)]
    for cut in range(len(data) + 1):
        parsed, valid = parse_journal(data[:cut])
        complete = max(i for i, b in enumerate(boundaries) if b <= cut)
        assert parsed == records[:complete]
        assert valid == boundaries[complete]


def test_damaged_final_record_is_a_torn_write():
    records = _records(2)
    data = bytearray(_encoded(records))
    data[-1] ^= 0xFF
    parsed, valid = parse_journal(bytes(data))
    assert parsed == records[:1]
    assert valid == len(records[0].encode())


def test_damage_before_the_final_record_is_fatal():
    records = _records(2)
    data = bytearray(_encoded(records))
    data[len(records[0].encode()) - 1] ^= 0xFF
    with pytest.raises(CorruptJournal):
        parse_journal(bytes(data))


def test_damaged_length_before_intact_records_is_fatal():
    data = bytearray(_encoded(_records(3)))
    data[0:4] = (0xFFFF).to_bytes(4, "little")
    with pytest.raises(CorruptJournal):
        parse_journal(bytes(data))
    with pytest.raises(CorruptJournal):
        MemoryJournal(bytes(data)).recover()


def test_oversized_length_in_final_record_is_a_torn_write():
    records = _records(2)
    data = bytearray(_encoded(records))
    first = len(records[0].encode())
    data[first:first + 4] = (0xFFFF).to_bytes(4, "little")
    parsed, valid = parse_journal(bytes(data))
    assert parsed == records[:1]
    assert valid == first


def test_sequence_must_increase():
    records = _records(2)
    swapped = records[1].encode() + records[0].encode()
    with pytest.raises(CorruptJournal):
        parse_journal(swapped)


def test_file_journal_truncates_torn_tail(tmp_path):
    path = tmp_path / "j" / "dispatcher.journal"
    journal = Journal(path, fsync=False)
    for record in _records(3):
        journal.append(record)
    journal.close()
    full = path.read_bytes()
    path.write_bytes(full[:-5])

    recovered = Journal(path, fsync=False).recover()
    assert recovered == _records(2)
    assert path.read_bytes() == _encoded(_records(2))


def test_file_journal_appends_after_recovery(tmp_path):
    path = tmp_path / "dispatcher.journal"
    first = Journal(path)
    first.append(_records(1)[0])
    first.close()
    second = Journal(path)
    assert len(second.recover()) == 1
    second.append(_records(2)[1])
    second.close()
    assert Journal(path).recover() == _records(2)


def test_missing_file_recovers_empty(tmp_path):
    assert Journal(tmp_path / "none.journal").recover() == []


def test_memory_journal():
    journal = MemoryJournal()
    for record in _records(2):
        journal.append(record)
    torn = MemoryJournal(bytes(journal.buffer) + b"\x01\x02")
    assert torn.recover() == _records(2)
    assert bytes(torn.buffer) == bytes(journal.buffer)
