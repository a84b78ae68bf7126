# src/wire/transport.py
"""
Threaded RPC transport over TCP.

`RpcServer` accepts connections and dispatches each request frame to a
handler on a thread pool; responses are written back under a per-connection
lock, in completion order. `RpcClient` multiplexes concurrent calls over one
connection and matches responses by correlation id.
"""

import itertools
import logging
import socket
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from typing import Callable, Dict, Mapping, Optional, Set, Tuple, Type

from src.core.errors import (
    ConnectionLost,
    DataServiceError,
    MalformedSpec,
    RpcTimeout,
    UnknownType,
    error_from_code,
)
from src.wire.frames import (
    CODEC_LZ4,
    CODEC_NONE,
    Frame,
    codec_for,
    encode_frame,
    encode_preamble,
    frame_to_message,
    read_frame,
    read_preamble,
)
from src.wire.messages import RESPONSE_FOR, ErrorResponse, Message

logger = logging.getLogger(__name__)

Handler = Callable[[Message], Message]

# Bodies smaller than this are sent uncompressed even on an lz4 connection.
COMPRESS_MIN_BYTES = 1024
INTERNAL_ERROR_CODE = 1


def parse_address(address: str) -> Tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address '{address}' is not of the form host:port")
    return host or "127.0.0.1", int(port)


def _encode(message: Message, correlation_id: int, codec: int) -> bytes:
    data = encode_frame(message, correlation_id)
    if codec == CODEC_LZ4 and len(data) >= COMPRESS_MIN_BYTES:
        data = encode_frame(message, correlation_id, compressed=True)
    return data


class _Connection:
    """Server side of one accepted connection."""

    def __init__(self, server: "RpcServer", sock: socket.socket, peer: str):
        self.server = server
        self.sock = sock
        self.peer = peer
        self.reader = sock.makefile("rb")
        self.codec = CODEC_NONE
        self._write_lock = threading.Lock()

    def send(self, message: Message, correlation_id: int) -> None:
        data = _encode(message, correlation_id, self.codec)
        with self._write_lock:
            try:
                self.sock.sendall(data)
            except OSError as e:
                logger.debug(f"Dropping response to {self.peer}: {e}")

    def serve(self) -> None:
        try:
            requested = read_preamble(self.reader)
            self.codec = requested if requested in (CODEC_NONE, CODEC_LZ4) else CODEC_NONE
            with self._write_lock:
                self.sock.sendall(encode_preamble(self.codec))
            while True:
                frame = read_frame(self.reader)
                self.server.submit(self, frame)
        except (ConnectionLost, OSError) as e:
            logger.debug(f"Connection from {self.peer} closed: {e}")
        except DataServiceError as e:
            logger.warning(f"Closing connection from {self.peer}: {e}")
        finally:
            self.close()

    def close(self) -> None:
        self.server._forget(self)
        try:
            self.sock.close()
        except OSError:
            pass


class RpcServer:
    """
    Serves request handlers keyed by request message class.

    Args:
        handlers: Request class -> callable returning the response message.
        host: Interface to bind.
        port: TCP port; 0 picks an ephemeral port (see `address`).
        handler_threads: Size of the request handler pool.
        name: Label used in log lines and thread names.
    """

    def __init__(
        self,
        handlers: Mapping[Type[Message], Handler],
        host: str = "127.0.0.1",
        port: int = 0,
        handler_threads: int = 16,
        name: str = "rpc",
    ):
        self.handlers: Dict[Type[Message], Handler] = dict(handlers)
        self.host = host
        self.port = port
        self.name = name
        self._handler_threads = handler_threads
        self._listener: Optional[socket.socket] = None
        self._executor: Optional[ThreadPoolExecutor] = None
        self._connections: Set[_Connection] = set()
        self._lock = threading.Lock()
        self._stopped = threading.Event()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "RpcServer":
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((self.host, self.port))
        self._listener.listen(128)
        self.port = self._listener.getsockname()[1]
        self._executor = ThreadPoolExecutor(self._handler_threads, thread_name_prefix=f"{self.name}-handler")
        self._stopped.clear()
        threading.Thread(target=self._accept_loop, name=f"{self.name}-accept", daemon=True).start()
        logger.info(f"{self.name} server listening on {self.address}.")
        return self

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                sock, peer = self._listener.accept()
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(self, sock, f"{peer[0]}:{peer[1]}")
            with self._lock:
                self._connections.add(conn)
            threading.Thread(target=conn.serve, name=f"{self.name}-conn", daemon=True).start()

    def _forget(self, conn: _Connection) -> None:
        with self._lock:
            self._connections.discard(conn)

    def submit(self, conn: _Connection, frame: Frame) -> None:
        try:
            request = frame_to_message(frame)
        except UnknownType as e:
            # The frame was read whole, so the stream is already at the next frame.
            logger.warning(f"{self.name}: {e} from {conn.peer}; skipped {e.frame_size} bytes.")
            conn.send(ErrorResponse(code=e.code, detail=e.detail), frame.correlation_id)
            return
        except DataServiceError as e:
            conn.send(ErrorResponse(code=e.code, detail=e.detail), frame.correlation_id)
            return
        if self._executor is None:
            return
        try:
            self._executor.submit(self._handle, conn, request, frame.correlation_id)
        except RuntimeError:
            pass  # shutting down

    def _handle(self, conn: _Connection, request: Message, correlation_id: int) -> None:
        handler = self.handlers.get(type(request))
        if handler is None:
            response: Message = ErrorResponse(
                code=UnknownType.code, detail=f"{type(request).__name__} is not served by {self.name}"
            )
        else:
            try:
                response = handler(request)
            except DataServiceError as e:
                response = ErrorResponse(code=e.code, detail=e.detail)
            except Exception as e:
                logger.error(f"{self.name}: handler for {type(request).__name__} failed.", exc_info=True)
                response = ErrorResponse(code=INTERNAL_ERROR_CODE, detail=repr(e))
        conn.send(response, correlation_id)

    def stop(self) -> None:
        self._stopped.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            connections = list(self._connections)
        for conn in connections:
            try:
                conn.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        if self._executor is not None:
            self._executor.shutdown(wait=False, cancel_futures=True)
            self._executor = None
        logger.info(f"{self.name} server on {self.address} stopped.")


class RpcClient:
    """
    One multiplexed connection to an RPC endpoint.

    Calls are at-most-once: a call that fails with `ConnectionLost` or
    `RpcTimeout` is never retried here. The next call after a lost connection
    dials a fresh one.

    Args:
        address: "host:port" of the server.
        timeout: Default call timeout in seconds.
        compression: "none" or "lz4"; negotiated in the preamble.
        latency_ms: Fixed delay added before each request is sent.
    """

    def __init__(
        self,
        address: str,
        timeout: float = 10.0,
        compression: str = "none",
        latency_ms: float = 0.0,
    ):
        self.address = address
        self.timeout = timeout
        self.latency_ms = latency_ms
        self._requested_codec = codec_for(compression)
        self._codec = CODEC_NONE
        self._sock: Optional[socket.socket] = None
        self._pending: Dict[int, Future] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        self._closed = False

    def _connect(self, timeout: float) -> socket.socket:
        host, port = parse_address(self.address)
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(encode_preamble(self._requested_codec))
            reader = sock.makefile("rb")
            self._codec = read_preamble(reader)
            sock.settimeout(None)
        except OSError as e:
            raise ConnectionLost(f"cannot connect to {self.address}: {e}") from e
        threading.Thread(
            target=self._read_loop, args=(sock, reader), name=f"rpc-client-{self.address}", daemon=True
        ).start()
        return sock

    def _ensure_connected(self, timeout: float) -> socket.socket:
        with self._lock:
            if self._closed:
                raise ConnectionLost(f"client for {self.address} is closed")
            if self._sock is None:
                self._sock = self._connect(timeout)
            return self._sock

    def _read_loop(self, sock: socket.socket, reader) -> None:
        error: DataServiceError = ConnectionLost(f"connection to {self.address} lost")
        try:
            while True:
                frame = read_frame(reader)
                with self._lock:
                    future = self._pending.pop(frame.correlation_id, None)
                if future is None:
                    logger.debug(f"Dropping late response {frame.correlation_id} from {self.address}.")
                    continue
                try:
                    future.set_result(frame_to_message(frame))
                except DataServiceError as e:
                    future.set_exception(e)
        except (ConnectionLost, OSError):
            pass
        except DataServiceError as e:
            error = ConnectionLost(f"connection to {self.address} dropped: {e}")
        finally:
            with self._lock:
                if self._sock is sock:
                    self._sock = None
                pending, self._pending = self._pending, {}
            for future in pending.values():
                if not future.done():
                    future.set_exception(error)
            try:
                sock.close()
            except OSError:
                pass

    def call(self, request: Message, timeout: Optional[float] = None) -> Message:
        """
        Sends `request` and waits for its response.

        Raises:
            RpcTimeout: no response within the timeout.
            ConnectionLost: the endpoint is unreachable or the connection dropped.
            DataServiceError: the server answered with an error; the local class
                for its code, or `RemoteError(code, detail)`.
        """
        expected = RESPONSE_FOR.get(type(request))
        if expected is None:
            raise MalformedSpec(f"{type(request).__name__} is not a request message")
        timeout = self.timeout if timeout is None else timeout
        if self.latency_ms:
            time.sleep(self.latency_ms / 1000.0)
        sock = self._ensure_connected(timeout)
        correlation_id = next(self._ids)
        future: Future = Future()
        with self._lock:
            self._pending[correlation_id] = future
        try:
            data = _encode(request, correlation_id, self._codec)
            with self._write_lock:
                sock.sendall(data)
        except OSError as e:
            with self._lock:
                self._pending.pop(correlation_id, None)
            raise ConnectionLost(f"cannot send to {self.address}: {e}") from e
        except DataServiceError:
            with self._lock:
                self._pending.pop(correlation_id, None)
            raise
        try:
            response = future.result(timeout=timeout)
        except FutureTimeout:
            with self._lock:
                self._pending.pop(correlation_id, None)
            raise RpcTimeout(f"{type(request).__name__} to {self.address} timed out after {timeout:.3f}s")
        if isinstance(response, ErrorResponse):
            raise error_from_code(response.code, response.detail)
        if not isinstance(response, expected):
            raise MalformedSpec(f"expected {expected.__name__}, got {type(response).__name__}")
        return response

    def close(self) -> None:
        _evict(self)
        with self._lock:
            self._closed = True
            sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


_clients: Dict[Tuple[str, str, float], RpcClient] = {}
_clients_lock = threading.Lock()


def get_client(address: str, compression: str = "none", latency_ms: float = 0.0) -> RpcClient:
    """Returns the shared client for an endpoint, creating it on first use."""
    key = (address, compression, latency_ms)
    with _clients_lock:
        client = _clients.get(key)
        if client is None or client._closed:
            client = RpcClient(address, compression=compression, latency_ms=latency_ms)
            _clients[key] = client
        return client


def _evict(client: RpcClient) -> None:
    with _clients_lock:
        for key in [k for k, c in _clients.items() if c is client]:
            del _clients[key]


def close_clients() -> None:
    """Closes and forgets every shared client."""
    with _clients_lock:
        clients = list(_clients.values())
    for client in clients:
        client.close()


def call(endpoint: str, request: Message, timeout: float = 10.0) -> Message:
    """
    Sends one request over the shared connection to `endpoint`. A lost
    connection drops the endpoint from the pool.
    """
    client = get_client(endpoint)
    try:
        return client.call(request, timeout=timeout)
    except ConnectionLost:
        client.close()
        raise
