# tests/test_records.py
import pytest

from src.core.errors import CorruptRecord, EmptyDataset, IoFailure, MalformedSpec
from src.data_processing.records import (
    RecordSource,
    make_key,
    read_record_file,
    read_records,
    scan_record_file,
    write_records,
)
from src.data_processing.shards import (
    ELEMENT_RANGE,
    FILE,
    FILE_SET,
    ShardSpec,
    enumerate_range_shards,
    enumerate_shards,
)
from src.data_processing.synthetic import SyntheticSpec, generate_synthetic, load_manifest
from src.pipeline.elements import Element


def _elements(n):
    return [Element(payload=bytes([i]) * (i + 1), seq_len=i, key=i) for i in range(n)]


def test_written_records_read_back(tmp_path):
    record_file = write_records(tmp_path / "a.dfrg", _elements(5))
    assert record_file.count == 5
    assert scan_record_file(record_file.path) == 5
    read = list(read_record_file(record_file.path, file_index=2))
    assert [e.payload for e in read] == [e.payload for e in _elements(5)]
    assert [e.seq_len for e in read] == list(range(5))
    assert [e.key for e in read] == [make_key(2, i) for i in range(5)]


def test_write_leaves_no_temporary_file(tmp_path):
    write_records(tmp_path / "a.dfrg", _elements(2))
    assert [p.name for p in tmp_path.iterdir()] == ["a.dfrg"]


def test_flipped_payload_byte_is_detected(tmp_path):
    path = write_records(tmp_path / "a.dfrg", _elements(3)).path
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    reader = read_record_file(path)
    assert next(reader).key == 0
    assert next(reader).key == 1
    with pytest.raises(CorruptRecord):
        next(reader)


def test_truncated_file_is_detected(tmp_path):
    path = write_records(tmp_path / "a.dfrg", _elements(3)).path
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(CorruptRecord):
        list(read_record_file(path))


def test_bad_magic(tmp_path):
    path = tmp_path / "a.dfrg"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(CorruptRecord):
        list(read_record_file(path))


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        list(read_record_file(tmp_path / "missing.dfrg"))


def test_make_key_packs_file_and_ordinal():
    assert make_key(0, 7) == 7
    assert make_key(3, 1) == (3 << 32) | 1


# --- shards ---
def _all_keys(shards):
    return sorted(e.key for e in RecordSource(shards))


@pytest.mark.parametrize("granularity, hint, workers", [
    (FILE, 1, 1),
    (FILE_SET, 1, 2),
    (FILE_SET, 4, 4),
    (ELEMENT_RANGE, 3, 2),
    (ELEMENT_RANGE, 50, 4),
])
def test_shards_partition_the_dataset(small_dataset, granularity, hint, workers):
    data_dir, manifest = small_dataset
    shards = enumerate_shards(data_dir, granularity, hint, workers)
    expected = sorted(make_key(f, o) for f in range(len(manifest.files)) for o in range(25))
    assert _all_keys(shards) == expected
    assert [s.shard_id for s in shards] == list(range(len(shards)))


def test_file_granularity_is_one_shard_per_file(small_dataset):
    data_dir, _ = small_dataset
    shards = enumerate_shards(data_dir, FILE)
    assert len(shards) == 4
    assert all(len(s.paths) == 1 for s in shards)


def test_element_range_targets_the_hint(small_dataset):
    data_dir, _ = small_dataset
    shards = enumerate_shards(data_dir, ELEMENT_RANGE, shards_per_worker_hint=2, num_workers=4)
    assert len(shards) == 8


def test_element_range_skips_without_reading_early_payloads(small_dataset):
    data_dir, _ = small_dataset
    shard = next(s for s in enumerate_shards(data_dir, ELEMENT_RANGE, 8, 1) if s.start)
    read = list(read_records(shard))
    assert [e.key & 0xFFFFFFFF for e in read] == list(range(shard.start, shard.end))


def test_shard_spec_dict_round_trip():
    shard = ShardSpec(shard_id=2, granularity=ELEMENT_RANGE, paths=("a",), file_indices=(1,), start=3, end=9)
    assert ShardSpec.from_dict(shard.to_dict()) == shard


def test_empty_directory(tmp_path):
    with pytest.raises(EmptyDataset):
        enumerate_shards(tmp_path, FILE)


def test_missing_directory(tmp_path):
    with pytest.raises(IoFailure):
        enumerate_shards(tmp_path / "nope", FILE)


def test_unknown_granularity(small_dataset):
    with pytest.raises(MalformedSpec):
        enumerate_shards(small_dataset[0], "chunks")


def test_range_shards_cover_the_range():
    shards = enumerate_range_shards(10, 33, 4)
    assert len(shards) == 4
    assert _all_keys(shards) == list(range(10, 33))
    with pytest.raises(EmptyDataset):
        enumerate_range_shards(5, 5, 2)


# --- synthetic ---
def test_synthetic_generation_is_deterministic(tmp_path):
    spec = SyntheticSpec(num_files=2, records_per_file=10, seed=5)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    for name in ("part-00000.dfrg", "part-00001.dfrg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_describes_the_files(small_dataset):
    data_dir, manifest = small_dataset
    loaded = load_manifest(data_dir)
    assert loaded == manifest
    assert loaded.total_records == 100
    assert [f.name for f in loaded.files] == [f"part-{i:05d}.dfrg" for i in range(4)]


def test_bimodal_lengths(bimodal_dataset):
    data_dir, _ = bimodal_dataset
    lengths = {e.seq_len for e in RecordSource(enumerate_shards(data_dir, FILE))}
    assert lengths == {16, 480}


def test_zero_files_is_empty(tmp_path):
    with pytest.raises(EmptyDataset):
        generate_synthetic(SyntheticSpec(num_files=0, records_per_file=3), tmp_path)


def test_inverted_ranges_are_rejected():
    with pytest.raises(ValueError):
        SyntheticSpec(num_files=1, records_per_file=1, seq_len_min=10, seq_len_max=2)
