# Lint as: python3
"""Message transports.

Both transports move encoded frames, so the in-process transport used by tests exercises exactly the bytes
a socket would carry. Receiving raises the builtin `TimeoutError` when nothing arrives in time and
[`~fedlora.errors.FedConnectionError`] when the peer is gone.
"""

import abc
import queue
import socket
import threading
import time
from typing import Optional, Tuple

from ..errors import FedConnectionError
from ..utils.logging import get_logger
from .messages import Message, decode, encode, frame_length


logger = get_logger(__name__)

_CLOSED = object()


class Connection(abc.ABC):
    """One bidirectional message channel between the aggregator and a client."""

    @abc.abstractmethod
    def send(self, msg: Message) -> None:
        ...

    @abc.abstractmethod
    def recv(self, timeout: Optional[float] = None) -> Message:
        ...

    @abc.abstractmethod
    def close(self) -> None:
        ...


class Listener(abc.ABC):
    """Aggregator-side endpoint handing out one [`Connection`] per connecting client."""

    @abc.abstractmethod
    def accept(self, timeout: Optional[float] = None) -> Connection:
        ...

    @abc.abstractmethod
    def connect(self, timeout: Optional[float] = None) -> Connection:
        """Client-side connection to this listener."""

    @abc.abstractmethod
    def close(self) -> None:
        ...


class InProcessConnection(Connection):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, msg: Message) -> None:
        if self._closed:
            raise FedConnectionError("Connection is closed", client_id=msg.sender_id)
        self._outbox.put(encode(msg))

    def recv(self, timeout: Optional[float] = None) -> Message:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"No message within {timeout} s") from None
        if item is _CLOSED:
            self._closed = True
            # leave the marker for any other reader of this inbox
            self._inbox.put(_CLOSED)
            raise FedConnectionError("Peer closed the connection")
        return decode(item)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)
            self._inbox.put(_CLOSED)


class InProcessListener(Listener):
    """Queue-backed listener for running every role inside one process."""

    def __init__(self):
        self._pending: queue.Queue = queue.Queue()
        self._closed = False

    def connect(self, timeout: Optional[float] = None) -> Connection:
        if self._closed:
            raise FedConnectionError("Listener is closed")
        to_client, to_server = queue.Queue(), queue.Queue()
        self._pending.put(InProcessConnection(inbox=to_server, outbox=to_client))
        return InProcessConnection(inbox=to_client, outbox=to_server)

    def accept(self, timeout: Optional[float] = None) -> Connection:
        try:
            return self._pending.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"No client connected within {timeout} s") from None

    def close(self) -> None:
        self._closed = True


def _recv_exact(sock: socket.socket, length: int) -> bytes:
    chunks = []
    got = 0
    while got < length:
        chunk = sock.recv(length - got)
        if not chunk:
            raise FedConnectionError("Peer disappeared in the middle of a frame" if got else "Peer closed the connection")
        got += len(chunk)
        chunks.append(chunk)
    return b"".join(chunks)


class SocketConnection(Connection):
    """Length-prefixed frames over a TCP socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._send_lock = threading.Lock()

    def send(self, msg: Message) -> None:
        data = encode(msg)
        try:
            with self._send_lock:
                self.sock.sendall(data)
        except OSError as err:
            raise FedConnectionError(f"Sending {msg.kind.value} failed: {err}", client_id=msg.sender_id) from err

    def recv(self, timeout: Optional[float] = None) -> Message:
        try:
            self.sock.settimeout(timeout)
            prefix = _recv_exact(self.sock, 4)
            # a started frame is read to its end
            self.sock.settimeout(None)
            body = _recv_exact(self.sock, frame_length(prefix))
        except socket.timeout:
            raise TimeoutError(f"No message within {timeout} s") from None
        except OSError as err:
            raise FedConnectionError(f"Receiving failed: {err}") from err
        return decode(prefix + body)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class SocketListener(Listener):
    """TCP listener. Port `0` binds an ephemeral port, see `address`."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, backlog: int = 16):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(backlog)
        logger.info(f"Listening on {self.address[0]}:{self.address[1]}")

    @property
    def address(self) -> Tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout: Optional[float] = None) -> Connection:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise TimeoutError(f"No client connected within {timeout} s") from None
        conn.settimeout(None)
        return SocketConnection(conn)

    def connect(self, timeout: Optional[float] = None) -> Connection:
        return connect_socket(*self.address, timeout=timeout)

    def close(self) -> None:
        self.sock.close()


def connect_socket(host: str, port: int, timeout: Optional[float] = None, retry_interval: float = 0.1) -> Connection:
    """Connect to an aggregator, retrying refused connections until `timeout` elapses."""
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            return SocketConnection(sock)
        except OSError as err:
            if deadline is not None and time.monotonic() >= deadline:
                raise FedConnectionError(f"Could not connect to {host}:{port}: {err}") from err
            time.sleep(retry_interval)


def make_listener(transport: str, host: str = "127.0.0.1", port: int = 0) -> Listener:
    if transport == "in_process":
        return InProcessListener()
    if transport == "socket":
        return SocketListener(host, port)
    raise ValueError(f"Unknown transport {transport!r}")
