"""
Reliable ordered byte streams for the channel layer.

PipeStream pairs carry bytes between threads of one process (run_local and
tests); SocketStream wraps TCP. Both raise ChannelTimeout when a read
outlasts `timeout` and ChannelClosed when the peer is gone.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Callable, Optional, Protocol

from errors import ChannelClosed, ChannelTimeout, ConfigError

logger = logging.getLogger(__name__)

CONNECT_RETRY_INTERVAL = 0.05


class Stream(Protocol):
    timeout: Optional[float]

    def send_all(self, data: bytes) -> None: ...

    def recv_exactly(self, n: int) -> bytes: ...

    def close(self) -> None: ...


StreamTap = Callable[[str, Stream], Stream]


# ========================================
# In-process pipes
# ========================================

class _Pipe:
    def __init__(self):
        self._buffer = bytearray()
        self._closed = False
        self._cond = threading.Condition()

    def write(self, data: bytes) -> None:
        with self._cond:
            if self._closed:
                raise ChannelClosed("pipe closed")
            self._buffer += data
            self._cond.notify_all()

    def read_exactly(self, n: int, timeout: Optional[float]) -> bytes:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while len(self._buffer) < n:
                if self._closed:
                    raise ChannelClosed(f"pipe closed with {len(self._buffer)} of {n} bytes pending")
                if deadline is None:
                    self._cond.wait()
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ChannelTimeout(f"no data within {timeout:.2f}s")
                self._cond.wait(remaining)
            data = bytes(self._buffer[:n])
            del self._buffer[:n]
            return data

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class PipeStream:
    def __init__(self, inbox: _Pipe, outbox: _Pipe, timeout: Optional[float] = None):
        self._inbox = inbox
        self._outbox = outbox
        self.timeout = timeout

    def send_all(self, data: bytes) -> None:
        self._outbox.write(data)

    def recv_exactly(self, n: int) -> bytes:
        return self._inbox.read_exactly(n, self.timeout)

    def close(self) -> None:
        self._outbox.close()
        self._inbox.close()


def duplex_pair() -> tuple[PipeStream, PipeStream]:
    a_to_b, b_to_a = _Pipe(), _Pipe()
    return PipeStream(b_to_a, a_to_b), PipeStream(a_to_b, b_to_a)


# ========================================
# TCP
# ========================================

class SocketStream:
    def __init__(self, sock: socket.socket, timeout: Optional[float] = None):
        self._sock = sock
        self.timeout = timeout

    def send_all(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as e:
            raise ChannelClosed(f"send failed: {e}") from e

    def recv_exactly(self, n: int) -> bytes:
        self._sock.settimeout(self.timeout)
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            try:
                count = self._sock.recv_into(view[got:], n - got)
            except socket.timeout:
                raise ChannelTimeout(f"no data within {self.timeout}s") from None
            except OSError as e:
                raise ChannelClosed(f"receive failed: {e}") from e
            if count == 0:
                raise ChannelClosed(f"peer closed with {got} of {n} bytes read")
            got += count
        return bytes(buf)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TappedStream:
    """Passes writes through `on_send` and reads through `on_recv`; either may observe or rewrite."""

    def __init__(
        self,
        inner: Stream,
        on_send: Optional[Callable[[bytes], bytes]] = None,
        on_recv: Optional[Callable[[bytes], bytes]] = None,
    ):
        self._inner = inner
        self._on_send = on_send or (lambda data: data)
        self._on_recv = on_recv or (lambda data: data)

    @property
    def timeout(self):
        return self._inner.timeout

    @timeout.setter
    def timeout(self, value):
        self._inner.timeout = value

    def send_all(self, data: bytes) -> None:
        self._inner.send_all(self._on_send(data))

    def recv_exactly(self, n: int) -> bytes:
        return self._on_recv(self._inner.recv_exactly(n))

    def close(self) -> None:
        self._inner.close()


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ConfigError(f"address must be host:port, got {address!r}")
    return host, int(port)


# ========================================
# Networks
# ========================================

class LocalListener:
    def __init__(self, network: "LocalNetwork", address: str):
        self._network = network
        self.address = address
        self._pending: "queue.Queue[PipeStream]" = queue.Queue()

    def _enqueue(self, stream: PipeStream) -> None:
        self._pending.put(stream)

    def accept(self, timeout: Optional[float] = None) -> Stream:
        try:
            return self._pending.get(timeout=timeout)
        except queue.Empty:
            raise ChannelTimeout(f"no connection on {self.address} within {timeout}s") from None

    def close(self) -> None:
        self._network._unregister(self.address, self)
        while True:
            try:
                self._pending.get_nowait().close()
            except queue.Empty:
                break


class LocalNetwork:
    """Address registry connecting in-process listeners and connectors."""

    def __init__(self, tap: Optional[StreamTap] = None):
        self._listeners: dict[str, LocalListener] = {}
        self._lock = threading.Lock()
        self._tap = tap

    def listen(self, address: str) -> LocalListener:
        with self._lock:
            if address in self._listeners:
                raise ConfigError(f"address already in use: {address}")
            listener = LocalListener(self, address)
            self._listeners[address] = listener
            return listener

    def _unregister(self, address: str, listener: LocalListener) -> None:
        with self._lock:
            if self._listeners.get(address) is listener:
                del self._listeners[address]

    def connect(self, address: str, timeout: float = 10.0) -> Stream:
        deadline = time.monotonic() + timeout
        while True:
            with self._lock:
                listener = self._listeners.get(address)
            if listener is not None:
                mine, theirs = duplex_pair()
                listener._enqueue(theirs)
                return self._tap(address, mine) if self._tap else mine
            if time.monotonic() >= deadline:
                raise ChannelClosed(f"nothing listening on {address}")
            time.sleep(CONNECT_RETRY_INTERVAL)


class TcpListener:
    def __init__(self, address: str):
        host, port = parse_address(address)
        self._sock = socket.create_server((host, port))
        self.address = f"{host}:{self._sock.getsockname()[1]}"

    def accept(self, timeout: Optional[float] = None) -> Stream:
        self._sock.settimeout(timeout)
        try:
            conn, peer = self._sock.accept()
        except socket.timeout:
            raise ChannelTimeout(f"no connection on {self.address} within {timeout}s") from None
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        logger.debug("accepted %s:%s on %s", peer[0], peer[1], self.address)
        return SocketStream(conn)

    def close(self) -> None:
        self._sock.close()


class TcpNetwork:
    def __init__(self, tap: Optional[StreamTap] = None):
        self._tap = tap

    def listen(self, address: str) -> TcpListener:
        return TcpListener(address)

    def connect(self, address: str, timeout: float = 10.0) -> Stream:
        host, port = parse_address(address)
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                break
            except OSError as e:
                if time.monotonic() >= deadline:
                    raise ChannelClosed(f"cannot connect to {address}: {e}") from e
                time.sleep(CONNECT_RETRY_INTERVAL)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        stream = SocketStream(sock)
        return self._tap(address, stream) if self._tap else stream
