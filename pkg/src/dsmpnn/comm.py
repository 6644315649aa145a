"""Worker runtime and message transport.

A :class:`WorkerGroup` runs one function per rank, each in its own
execution context (thread, or forked process with the socket transport).
Ranks talk through a :class:`Communicator`: point-to-point messages keyed
by (tag, src, dst) plus blocking collectives (halo exchange, allreduce,
loss reduction, barrier). Collectives must be called by every rank in the
same order with the same tag; a mismatch surfaces as :class:`CommTimeout`.
"""

from __future__ import annotations

import enum
import multiprocessing as mp
import pickle
import socket
import struct
import threading
import time
import traceback
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Callable, NamedTuple

import numpy as np

WIRE_MAGIC = 0x44534D50  # "DSMP"
HEADER = struct.Struct("<IIIHBBHHQ")
_PREC_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_PREC = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

DEFAULT_TIMEOUT = 120.0


class Channel(enum.IntEnum):
    LATENT = 0
    DECODED = 1
    GRAD = 2
    LOSS = 3
    CTRL = 4


class Tag(NamedTuple):
    epoch: int
    sample: int
    hop: int
    channel: Channel


class CommError(RuntimeError):
    pass


class CommTimeout(CommError):
    """A collective waited too long; usually mismatched tags or call order."""


class WorkerAborted(CommError):
    """Another rank failed; this rank stops waiting."""


class ContractError(CommError):
    pass


@dataclass
class Message:
    tag: Tag
    src: int
    dst: int
    payload: np.ndarray
    extents: tuple[int, ...] = ()

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload).reshape(-1)
        if not self.extents:
            self.extents = (self.payload.size,)
        if int(np.prod(self.extents)) != self.payload.size:
            raise ContractError(f"payload of {self.payload.size} values vs extents {self.extents}")


def encode_frame(msg: Message) -> bytes:
    payload = msg.payload
    code = _PREC_CODE[payload.dtype]
    raw = payload.astype(_CODE_PREC[code], copy=False).tobytes()
    t = msg.tag
    return HEADER.pack(WIRE_MAGIC, t.epoch, t.sample, t.hop, int(t.channel), code,
                       msg.src, msg.dst, len(raw)) + raw


def decode_header(buf: bytes) -> tuple[Tag, int, int, int, int]:
    magic, epoch, sample, hop, channel, code, src, dst, nbytes = HEADER.unpack(buf)
    if magic != WIRE_MAGIC:
        raise CommError(f"bad frame magic {magic:#x}")
    return Tag(epoch, sample, hop, Channel(channel)), code, src, dst, nbytes


def decode_frame(buf: bytes) -> tuple[Message, int]:
    """Decode one frame from the front of ``buf``; returns (message, bytes consumed)."""
    tag, code, src, dst, nbytes = decode_header(buf[:HEADER.size])
    end = HEADER.size + nbytes
    if len(buf) < end:
        raise CommError("truncated frame")
    payload = np.frombuffer(buf[HEADER.size:end], dtype=_CODE_PREC[code]).astype(_CODE_PREC[code].newbyteorder("="))
    return Message(tag, src, dst, payload), end


class Mailbox:
    """Per-rank store of arrived messages, matched by (src, tag)."""

    def __init__(self, abort: Any):
        self._items: dict[tuple[int, Tag], np.ndarray] = {}
        self._cond = threading.Condition()
        self._abort = abort

    def put(self, src: int, tag: Tag, payload: np.ndarray) -> None:
        with self._cond:
            key = (src, tag)
            if key in self._items:
                raise CommError(f"duplicate message from rank {src} with tag {tag}")
            self._items[key] = payload
            self._cond.notify_all()

    def take(self, src: int, tag: Tag, deadline: float) -> np.ndarray | None:
        key = (src, tag)
        with self._cond:
            while key not in self._items:
                if self._abort.is_set():
                    raise WorkerAborted("another rank failed")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(min(remaining, 0.5))
            return self._items.pop(key)


class QueueTransport:
    """In-process delivery: payloads are copied into the destination mailbox."""

    def __init__(self, n_proc: int, abort: threading.Event):
        self.mailboxes = [Mailbox(abort) for _ in range(n_proc)]

    def endpoint(self, rank: int) -> "QueueEndpoint":
        return QueueEndpoint(self, rank)


class QueueEndpoint:
    def __init__(self, transport: QueueTransport, rank: int):
        self.transport = transport
        self.mailbox = transport.mailboxes[rank]

    def send(self, msg: Message) -> int:
        self.transport.mailboxes[msg.dst].put(msg.src, msg.tag, msg.payload.copy())
        return HEADER.size + msg.payload.nbytes

    def close(self) -> None:
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


class SocketEndpoint:
    """Loopback TCP full mesh using the self-delimiting wire frames.

    Each rank owns a pre-bound listener; rank ``p`` connects to every
    ``q > p`` and accepts from every ``q < p``.
    """

    def __init__(self, rank: int, n_proc: int, listener: socket.socket, ports: list[int], abort):
        self.rank = rank
        self.mailbox = Mailbox(abort)
        self.conns: dict[int, socket.socket] = {}
        self.locks: dict[int, threading.Lock] = defaultdict(threading.Lock)
        self._readers: list[threading.Thread] = []
        for q in range(rank + 1, n_proc):
            s = socket.create_connection(("127.0.0.1", ports[q]))
            s.sendall(struct.pack("<H", rank))
            self.conns[q] = s
        for _ in range(rank):
            s, _addr = listener.accept()
            (peer,) = struct.unpack("<H", _recv_exact(s, 2))
            self.conns[peer] = s
        listener.close()
        for peer, s in self.conns.items():
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._reader, args=(s,), daemon=True)
            t.start()
            self._readers.append(t)

    def _reader(self, s: socket.socket) -> None:
        try:
            while True:
                head = _recv_exact(s, HEADER.size)
                if head is None:
                    return
                tag, code, src, dst, nbytes = decode_header(head)
                body = _recv_exact(s, nbytes) if nbytes else b""
                if body is None:
                    return
                payload = np.frombuffer(body, dtype=_CODE_PREC[code]).astype(_CODE_PREC[code].newbyteorder("="))
                self.mailbox.put(src, tag, payload)
        except OSError:
            return

    def send(self, msg: Message) -> int:
        frame = encode_frame(msg)
        with self.locks[msg.dst]:
            self.conns[msg.dst].sendall(frame)
        return len(frame)

    def close(self) -> None:
        for s in self.conns.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


class Communicator:
    """One rank's handle on the group: point-to-point plus collectives."""

    def __init__(self, rank: int, n_proc: int, endpoint, timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.n_proc = n_proc
        self.endpoint = endpoint
        self.timeout = timeout
        self.bytes_sent = 0
        self.payload_bytes: dict[Channel, int] = defaultdict(int)
        self.messages_sent = 0

    def reset_counters(self) -> None:
        self.bytes_sent = 0
        self.payload_bytes = defaultdict(int)
        self.messages_sent = 0

    def send(self, dst: int, tag: Tag, values: np.ndarray) -> None:
        msg = Message(tag, self.rank, dst, values, tuple(np.shape(values)) or (1,))
        self.bytes_sent += self.endpoint.send(msg)
        self.payload_bytes[tag.channel] += msg.payload.nbytes
        self.messages_sent += 1

    def recv(self, src: int, tag: Tag, expected: int | None = None) -> np.ndarray:
        out = self.endpoint.mailbox.take(src, tag, time.monotonic() + self.timeout)
        if out is None:
            raise CommTimeout(f"rank {self.rank}: no message from rank {src} with tag {tag} "
                              f"within {self.timeout:.1f}s")
        if expected is not None and out.size != expected:
            raise ContractError(f"rank {self.rank}: expected {expected} values from rank {src}, got {out.size}")
        return out

    def _gather_all(self, tag: Tag, expected: int | None) -> dict[int, np.ndarray]:
        """Receive one message from each other rank; timeout names the missing ones."""
        deadline = time.monotonic() + self.timeout
        got: dict[int, np.ndarray] = {}
        for p in range(self.n_proc):
            if p == self.rank:
                continue
            out = self.endpoint.mailbox.take(p, tag, deadline)
            if out is None:
                missing = [q for q in range(self.n_proc) if q != self.rank and q not in got]
                raise CommTimeout(f"rank {self.rank}: ranks {missing} never arrived at tag {tag}")
            if expected is not None and out.size != expected:
                raise ContractError(f"rank {self.rank}: rank {p} sent {out.size} values, expected {expected}")
            got[p] = out
        return got

    def halo_exchange(self, view, local_values: np.ndarray, tag: Tag) -> np.ndarray:
        """Overwrite halo rows with the owners' interior rows.

        ``view`` is the rank's :class:`RankView`; rows of ``local_values``
        follow ``view.local_ids``. Returns a new array; interior rows untouched.
        """
        vals = np.asarray(local_values)
        if vals.shape[0] != len(view.local_ids):
            raise ContractError(f"rank {self.rank}: {vals.shape[0]} rows for {len(view.local_ids)} local nodes")
        width = int(np.prod(vals.shape[1:], dtype=np.int64))
        for q, pos in view.send_pos.items():
            if len(pos):
                self.send(q, tag, vals[pos])
        out = vals.copy()
        deadline = time.monotonic() + self.timeout
        for p, pos in view.recv_pos.items():
            if not len(pos):
                continue
            got = self.endpoint.mailbox.take(p, tag, deadline)
            if got is None:
                raise CommTimeout(f"rank {self.rank}: halo rows from rank {p} missing at tag {tag}")
            if got.size != len(pos) * width:
                raise ContractError(f"rank {self.rank}: halo payload of {got.size} values from rank {p}, "
                                    f"expected {len(pos) * width}")
            out[pos] = got.reshape(len(pos), *vals.shape[1:])
        return out

    def allreduce_sum(self, local: np.ndarray, tag: Tag) -> np.ndarray:
        """Elementwise sum over ranks, added in ascending rank order on every rank."""
        local = np.ascontiguousarray(local).reshape(-1)
        if self.n_proc == 1:
            return local.copy()
        for q in range(self.n_proc):
            if q != self.rank:
                self.send(q, tag, local)
        got = self._gather_all(tag, local.size)
        got[self.rank] = local
        total = got[0].astype(local.dtype, copy=True)
        for p in range(1, self.n_proc):
            total += got[p]
        return total

    def reduce_loss(self, local_sse: float, local_count: float, tag: Tag) -> tuple[float, float]:
        pair = np.array([local_sse, local_count], dtype=np.float64)
        total = self.allreduce_sum(pair, tag)
        if total[1] <= 0:
            raise ContractError("global interior count is zero")
        return float(total[0] / total[1]), float(total[1])

    def barrier(self, tag: Tag) -> None:
        if self.n_proc == 1:
            return
        token = np.array([float(self.rank)])
        for q in range(self.n_proc):
            if q != self.rank:
                self.send(q, tag, token)
        self._gather_all(tag, 1)


# launching -------------------------------------------------------------------

def _bind_listeners(n_proc: int) -> tuple[list[socket.socket], list[int]]:
    listeners, ports = [], []
    for _ in range(n_proc):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind(("127.0.0.1", 0))
        s.listen(n_proc)
        listeners.append(s)
        ports.append(s.getsockname()[1])
    return listeners, ports


def _process_entry(rank, n_proc, listeners, ports, timeout, fn, args, results):
    abort = threading.Event()
    for k, s in enumerate(listeners):
        if k != rank:
            s.close()
    try:
        ep = SocketEndpoint(rank, n_proc, listeners[rank], ports, abort)
        comm = Communicator(rank, n_proc, ep, timeout)
        try:
            results.put((rank, True, fn(comm, *args)))
        finally:
            ep.close()
    except BaseException as exc:  # noqa: BLE001 - reported to the coordinator
        try:
            pickle.loads(pickle.dumps(exc))
            carried = exc
        except Exception:  # noqa: BLE001 - fall back to a text report
            carried = None
        results.put((rank, False, (carried, type(exc).__name__, str(exc), traceback.format_exc())))


class WorkerGroup:
    """Runs ``fn(comm, *args)`` on ``n_proc`` ranks and returns per-rank results.

    ``transport`` is ``"queue"`` (threads only) or ``"socket"``; ``launcher``
    is ``"thread"`` or ``"process"`` (fork, socket transport).
    """

    def __init__(self, n_proc: int, transport: str = "queue", launcher: str = "thread",
                 timeout: float = DEFAULT_TIMEOUT):
        if n_proc < 1:
            raise ValueError("n_proc must be ≥ 1")
        if transport not in ("queue", "socket"):
            raise ValueError(f"unknown transport {transport!r}")
        if launcher not in ("thread", "process"):
            raise ValueError(f"unknown launcher {launcher!r}")
        if launcher == "process" and transport != "socket":
            raise ValueError("process launcher needs the socket transport")
        self.n_proc = n_proc
        self.transport = transport
        self.launcher = launcher
        self.timeout = timeout

    def run(self, fn: Callable[..., Any], *args) -> list[Any]:
        if self.launcher == "process":
            return self._run_processes(fn, args)
        return self._run_threads(fn, args)

    def _run_threads(self, fn, args) -> list[Any]:
        abort = threading.Event()
        results: list[Any] = [None] * self.n_proc
        errors: list[BaseException | None] = [None] * self.n_proc
        if self.transport == "queue":
            qt = QueueTransport(self.n_proc, abort)
            make_ep = qt.endpoint
        else:
            listeners, ports = _bind_listeners(self.n_proc)
            make_ep = lambda k: SocketEndpoint(k, self.n_proc, listeners[k], ports, abort)  # noqa: E731

        def body(k: int) -> None:
            ep = None
            try:
                ep = make_ep(k)
                results[k] = fn(Communicator(k, self.n_proc, ep, self.timeout), *args)
            except BaseException as exc:  # noqa: BLE001 - re-raised in the coordinator
                errors[k] = exc
                abort.set()
            finally:
                if ep is not None:
                    ep.close()

        if self.n_proc == 1:
            body(0)
        else:
            threads = [threading.Thread(target=body, args=(k,), name=f"rank{k}") for k in range(self.n_proc)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        _raise_first(errors)
        return results

    def _run_processes(self, fn, args) -> list[Any]:
        ctx = mp.get_context("fork")
        listeners, ports = _bind_listeners(self.n_proc)
        queue = ctx.Queue()
        procs = [ctx.Process(target=_process_entry,
                             args=(k, self.n_proc, listeners, ports, self.timeout, fn, args, queue))
                 for k in range(self.n_proc)]
        for p in procs:
            p.start()
        for s in listeners:
            s.close()
        results: list[Any] = [None] * self.n_proc
        failures = []
        for _ in range(self.n_proc):
            rank, ok, value = queue.get()
            if ok:
                results[rank] = value
            else:
                failures.append((rank, value))
                for p in procs:
                    if p.is_alive():
                        p.terminate()
                break
        for p in procs:
            p.join()
        if failures:
            rank, (exc, name, text, tb) = failures[0]
            if exc is not None:
                raise exc
            raise CommError(f"rank {rank} failed with {name}: {text}\n{tb}")
        return results


def _raise_first(errors: list[BaseException | None]) -> None:
    real = [e for e in errors if e is not None and not isinstance(e, WorkerAborted)]
    if real:
        raise real[0]
    aborted = [e for e in errors if e is not None]
    if aborted:
        raise aborted[0]
