# tests/test_wire.py
import io
import threading
import time
from typing import Literal, Union, get_args, get_origin

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import BaseModel

from src.core.errors import (
    BodyTooLarge,
    ChecksumMismatch,
    ConnectionLost,
    MalformedSpec,
    RemoteError,
    RpcTimeout,
    Truncated,
    UnknownJob,
    UnknownType,
)
from src.data_processing.shards import ShardSpec
from src.pipeline.elements import Batch, Element
from src.wire import transport
from src.wire.frames import (
    HEADER,
    MAX_BODY_BYTES,
    decode_frame,
    encode_frame,
    encode_preamble,
    parse_frame,
    read_frame,
    read_preamble,
)
from src.wire.messages import (
    MESSAGE_TYPES,
    CacheStatsRequest,
    CacheStatsResponse,
    ClientHeartbeatRequest,
    ElementResult,
    GetSplitResponse,
    GetStateRequest,
    HeartbeatRequest,
    JobUpdate,
    RegisterJobRequest,
    StateDump,
    TaskProgress,
    WorkerEndpoint,
)
from src.wire.transport import RpcClient, RpcServer, call, get_client, parse_address


def _batch():
    elements = [Element(payload=bytes(range(i, i + 4)), seq_len=i + 1, key=i) for i in range(3)]
    return Batch.of(elements, bucket_id=1).for_round(5)


@pytest.mark.parametrize("message", [
    RegisterJobRequest(graph=b"\x01\x02", policy="DYNAMIC", job_name="j", num_epochs=2),
    GetSplitResponse(shard=ShardSpec(shard_id=1, granularity="file", paths=("a",), file_indices=(0,))),
    HeartbeatRequest(worker_id=3, tasks=[TaskProgress(job_id=1, produced=4, done=True)], cpu_seconds=1.5),
    JobUpdate(job_id=1, workers=[WorkerEndpoint(worker_id=2, address="h:1", worker_index=0)], job_done=True),
    ElementResult(status="batch", batch=_batch(), round=5),
    ElementResult(status="end_of_job"),
    CacheStatsResponse(job_id=1, pointers={"1": 4, "2": 7}, evictions=6, produced=10),
    GetStateRequest(),
])
@pytest.mark.parametrize("compressed", [False, True])
def test_frames_carry_messages(message, compressed):
    data = encode_frame(message, correlation_id=42, compressed=compressed)
    frame, consumed = parse_frame(data)
    assert consumed == len(data)
    assert frame.correlation_id == 42
    assert frame.compressed == compressed
    assert decode_frame(data) == message


def test_batch_survives_the_wire():
    result = decode_frame(encode_frame(ElementResult(status="batch", batch=_batch())))
    assert result.batch == _batch()
    assert result.batch.keys == (0, 1, 2)


def test_partial_frames_are_truncated():
    data = encode_frame(CacheStatsRequest(job_id=9))
    for cut in range(len(data)):
        with pytest.raises(Truncated):
            parse_frame(data[:cut])


def test_two_frames_back_to_back():
    first = encode_frame(CacheStatsRequest(job_id=1), correlation_id=1)
    second = encode_frame(CacheStatsRequest(job_id=2), correlation_id=2)
    frame, consumed = parse_frame(first + second)
    assert frame.correlation_id == 1
    assert decode_frame((first + second)[consumed:]) == CacheStatsRequest(job_id=2)


def test_oversized_header_is_rejected():
    header = HEADER.pack(MAX_BODY_BYTES + 1, CacheStatsRequest.MSG_TYPE, 0, 0)
    with pytest.raises(BodyTooLarge):
        parse_frame(header)


def test_unknown_type_reports_frame_size():
    body = b"\x00\x00"
    data = HEADER.pack(len(body), 0x4242, 7, 0) + body
    with pytest.raises(UnknownType) as info:
        decode_frame(data)
    assert info.value.frame_size == len(data)


def test_damaged_compressed_body():
    data = bytearray(encode_frame(CacheStatsResponse(job_id=1, pointers={"1": 2}), compressed=True))
    data[-1] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        decode_frame(bytes(data))


def test_missing_required_field_is_malformed():
    good = encode_frame(ClientHeartbeatRequest(job_id=1, client_id=2))
    frame, _ = parse_frame(good)
    from src.core.binary import encode_map

    body = encode_map({"job_id": 1, "__v": 1})
    data = HEADER.pack(len(body), frame.msg_type, 0, 0) + body
    with pytest.raises(MalformedSpec):
        decode_frame(data)


def test_newer_schema_version_is_rejected():
    from src.core.binary import encode_map

    body = encode_map({"job_id": 1, "__v": 99})
    data = HEADER.pack(len(body), CacheStatsRequest.MSG_TYPE, 0, 0) + body
    with pytest.raises(MalformedSpec):
        decode_frame(data)


def test_stream_reader_and_preamble():
    stream = io.BytesIO(encode_preamble(1) + encode_frame(CacheStatsRequest(job_id=3), correlation_id=8))
    assert read_preamble(stream) == 1
    assert read_frame(stream).correlation_id == 8
    with pytest.raises(ConnectionLost):
        read_frame(stream)


def test_bad_preamble():
    with pytest.raises(ConnectionLost):
        read_preamble(io.BytesIO(b"HTTP/1"))


def test_parse_address():
    assert parse_address("10.0.0.1:5050") == ("10.0.0.1", 5050)
    assert parse_address(":7") == ("127.0.0.1", 7)
    with pytest.raises(ValueError):
        parse_address("nohost")


# --- transport ---
@pytest.fixture
def echo_server():
    release = threading.Event()

    def stats(request):
        if request.job_id == 404:
            raise UnknownJob("no such job")
        if request.job_id == 500:
            raise RuntimeError("handler bug")
        if request.job_id == 999:
            release.wait(5)
        return CacheStatsResponse(job_id=request.job_id, pointers={str(i): i for i in range(400)})

    server = RpcServer({CacheStatsRequest: stats}, name="echo").start()
    yield server
    release.set()
    server.stop()


@pytest.mark.parametrize("compression", ["none", "lz4"])
def test_call_returns_matching_response(echo_server, compression):
    client = RpcClient(echo_server.address, compression=compression)
    try:
        assert client.call(CacheStatsRequest(job_id=7)).job_id == 7
    finally:
        client.close()


def test_concurrent_calls_are_matched_by_correlation_id(echo_server):
    client = RpcClient(echo_server.address)
    results = {}

    def worker(job_id):
        results[job_id] = client.call(CacheStatsRequest(job_id=job_id)).job_id

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    client.close()
    assert results == {i: i for i in range(20)}


def test_server_errors_are_rebuilt_locally(echo_server):
    client = RpcClient(echo_server.address)
    with pytest.raises(UnknownJob):
        client.call(CacheStatsRequest(job_id=404))
    with pytest.raises(RemoteError):
        client.call(CacheStatsRequest(job_id=500))
    # The connection stays usable after an error response.
    assert client.call(CacheStatsRequest(job_id=1)).job_id == 1
    client.close()


def test_unserved_request_type(echo_server):
    client = RpcClient(echo_server.address)
    with pytest.raises(RemoteError):
        client.call(ClientHeartbeatRequest(job_id=1, client_id=1))
    client.close()


def test_call_times_out(echo_server):
    client = RpcClient(echo_server.address)
    with pytest.raises(RpcTimeout):
        client.call(CacheStatsRequest(job_id=999), timeout=0.2)
    client.close()


def test_unreachable_endpoint():
    client = RpcClient("127.0.0.1:1", timeout=0.5)
    with pytest.raises(ConnectionLost):
        client.call(CacheStatsRequest(job_id=1))


def test_stopping_the_server_fails_pending_calls(echo_server):
    client = RpcClient(echo_server.address)
    client.call(CacheStatsRequest(job_id=1))
    errors = []

    def blocked():
        try:
            client.call(CacheStatsRequest(job_id=999), timeout=5)
        except (ConnectionLost, RpcTimeout) as e:
            errors.append(e)

    t = threading.Thread(target=blocked)
    t.start()
    time.sleep(0.2)
    echo_server.stop()
    t.join(6)
    client.close()
    assert errors and isinstance(errors[0], ConnectionLost)


def test_response_type_must_be_a_request():
    client = RpcClient("127.0.0.1:1")
    with pytest.raises(MalformedSpec):
        client.call(CacheStatsResponse(job_id=1))


# --- every message in the catalog ---
_ints = st.integers(-(1 << 63), (1 << 63) - 1)
_elements = st.builds(Element, payload=st.binary(max_size=16), seq_len=st.integers(0, 4096), key=_ints)
_batches = st.builds(
    lambda elements, bucket, round_index: Batch.of(elements, bucket).for_round(round_index)
    if round_index is not None
    else Batch.of(elements, bucket),
    st.lists(_elements, min_size=1, max_size=4),
    st.none() | st.integers(0, 64),
    st.none() | st.integers(0, 1000),
)
_shards = st.builds(
    ShardSpec,
    shard_id=st.integers(0, 1 << 32),
    granularity=st.sampled_from(["file", "element-range", "file-set"]),
    paths=st.lists(st.text(max_size=12), max_size=3).map(tuple),
    file_indices=st.lists(st.integers(0, 1000), max_size=3).map(tuple),
    start=st.none() | st.integers(0, 1 << 20),
    end=st.none() | st.integers(0, 1 << 20),
)


def _values(annotation):
    origin, args = get_origin(annotation), get_args(annotation)
    if origin is Union:
        (inner,) = [a for a in args if a is not type(None)]
        return st.none() | _values(inner)
    if origin is list:
        return st.lists(_values(args[0]), max_size=3)
    if origin is dict:
        return st.dictionaries(st.text(max_size=8), _values(args[1]), max_size=3)
    if origin is Literal:
        return st.sampled_from(args)
    if annotation is Batch:
        return _batches
    if annotation is ShardSpec:
        return _shards
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return _models(annotation)
    return {
        bool: st.booleans(),
        int: _ints,
        float: st.floats(allow_nan=False, allow_infinity=False),
        str: st.text(max_size=16),
        bytes: st.binary(max_size=32),
    }[annotation]


def _models(cls):
    fields = {name: _values(field.annotation) for name, field in cls.model_fields.items()}
    return st.fixed_dictionaries(fields).map(lambda kwargs: cls(**kwargs))


catalog_messages = st.sampled_from(sorted(MESSAGE_TYPES.values(), key=lambda c: c.MSG_TYPE)).flatmap(_models)


@settings(max_examples=300, deadline=None)
@given(catalog_messages, st.integers(0, (1 << 64) - 1), st.booleans())
def test_every_catalog_message_survives_a_frame(message, correlation_id, compressed):
    data = encode_frame(message, correlation_id=correlation_id, compressed=compressed)
    assert decode_frame(data) == message
    assert parse_frame(data)[0].correlation_id == correlation_id


def test_oversized_body_is_refused_when_encoding():
    with pytest.raises(BodyTooLarge):
        encode_frame(StateDump(state=bytes(65 * 1024 * 1024)))


def test_shared_clients_are_evicted_when_lost_or_closed(echo_server):
    address = echo_server.address
    assert call(address, CacheStatsRequest(job_id=1)).job_id == 1
    shared = get_client(address)
    assert call(address, CacheStatsRequest(job_id=2)).job_id == 2
    assert get_client(address) is shared
    shared.close()
    assert address not in {key[0] for key in transport._clients}

    echo_server.stop()
    with pytest.raises(ConnectionLost):
        call(address, CacheStatsRequest(job_id=3), timeout=1.0)
    assert address not in {key[0] for key in transport._clients}
