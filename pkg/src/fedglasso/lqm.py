"""Local Query Model: master/site aggregation over private row shards.

Wire format (all little endian)::

    magic "LQM1" | msg_type u8 | request_id u64 | site_index u16 |
    op_code u16 | payload_len u32 | payload_len x f64

Sites only ever answer with aggregates of the form ``A_i^T u_i``, Gram
blocks or scalar partials; raw rows and any n_i-length vector stay local.
The master sums partials in ascending site order so every transport produces
bitwise identical aggregates.
"""
from __future__ import annotations

import logging
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import _kernels as kern
from .data import GroupPartition, SiteShard, ordered_sum

log = logging.getLogger(__name__)

MAGIC = b"LQM1"
HEADER = struct.Struct("<4sBQHHI")
HEADER_SIZE = HEADER.size  # 21
MASTER = 0xFFFF
DEFAULT_TIMEOUT = 30.0


class MsgType(IntEnum):
    QUERY = 1
    PARTIAL = 2
    AGGREGATE = 3
    CONTROL = 4


class Op(IntEnum):
    CORRELATION = 1      # A_i^T y_i
    GROUP_GRAM = 2       # [s, e] -> vec(A_ig^T A_ig)
    SQNORM = 3           # [slot] -> ||slot||^2
    GRADIENT = 4         # [s, e] -> A_ig^T R_i
    APPLY_BLOCK = 5      # control [s, e, new block]
    SET_MODEL = 6        # control [x]
    RESIDUAL_STATS = 7   # -> [R.R, R.y]
    RESIDUAL_CORR = 8    # -> A_i^T R_i
    DUAL_SETUP = 9       # [lam_prev, lam_next, at_max, lam_max, s, e, L...] -> [v1.v1, v1.v2]
    PROJECT = 10         # [coef] -> [||v2_perp||^2]
    SCREEN_CORR = 11     # -> A_i^T (theta + v2_perp / 2)
    AUDIT = 12           # -> [max |R - (A x - y)|]
    ERROR = 0xFFFE
    SHUTDOWN = 0xFFFF


class Slot(IntEnum):
    RESIDUAL = 0
    THETA = 1
    V1 = 2
    V2 = 3
    V2_PERP = 4


class LqmError(RuntimeError):
    pass


class FrameError(LqmError, ValueError):
    pass


class LqmTimeout(LqmError):
    def __init__(self, missing):
        super().__init__(f"no reply from sites {sorted(missing)}")
        self.missing = set(missing)


class LqmProtocolError(LqmError):
    pass


class LqmConnectionError(LqmError):
    pass


@dataclass(frozen=True, eq=False)
class LqmFrame:
    msg_type: int
    request_id: int
    site_index: int
    op_code: int
    payload: np.ndarray = ()

    def __post_init__(self):
        object.__setattr__(self, "payload", np.asarray(self.payload, dtype=np.float64).ravel())

    def __eq__(self, other):
        if not isinstance(other, LqmFrame):
            return NotImplemented
        return (self.msg_type, self.request_id, self.site_index, self.op_code) == \
            (other.msg_type, other.request_id, other.site_index, other.op_code) and \
            self.payload.astype("<f8").tobytes() == other.payload.astype("<f8").tobytes()

    def __hash__(self):
        return hash((self.msg_type, self.request_id, self.site_index, self.op_code, self.payload.tobytes()))

    @property
    def wire_length(self) -> int:
        return HEADER_SIZE + 8 * len(self.payload)


def encode_frame(frame: LqmFrame) -> bytes:
    if frame.msg_type not in MsgType._value2member_map_:
        raise FrameError(f"unknown msg_type {frame.msg_type}")
    if not np.all(np.isfinite(frame.payload)):
        raise FrameError("payload must be finite")
    header = HEADER.pack(MAGIC, frame.msg_type, frame.request_id, frame.site_index, frame.op_code,
                         len(frame.payload))
    return header + frame.payload.astype("<f8").tobytes()


def _decode_header(buf):
    if len(buf) < HEADER_SIZE:
        raise FrameError(f"truncated header ({len(buf)} bytes)")
    magic, mtype, rid, site, op, n = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if mtype not in MsgType._value2member_map_:
        raise FrameError(f"unknown msg_type {mtype}")
    return mtype, rid, site, op, n


def decode_frame(buf: bytes) -> LqmFrame:
    mtype, rid, site, op, n = _decode_header(buf)
    if len(buf) != HEADER_SIZE + 8 * n:
        raise FrameError(f"payload_len {n} implies {HEADER_SIZE + 8 * n} bytes, got {len(buf)}")
    payload = np.frombuffer(buf, dtype="<f8", count=n, offset=HEADER_SIZE).astype(np.float64)
    return LqmFrame(mtype, rid, site, op, payload)


def iter_frames(buf: bytes):
    """Split a concatenation of raw frames (a transcript dump)."""
    pos = 0
    while pos < len(buf):
        *_, n = _decode_header(buf[pos:pos + HEADER_SIZE])
        end = pos + HEADER_SIZE + 8 * n
        if end > len(buf):
            raise FrameError("truncated frame at end of transcript")
        yield decode_frame(buf[pos:end])
        pos = end


def _recv_exact(sock, n):
    chunks = []
    while n:
        chunk = sock.recv(n)
        if not chunk:
            raise LqmConnectionError("connection closed")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> LqmFrame:
    head = _recv_exact(sock, HEADER_SIZE)
    *_, n = _decode_header(head)
    return decode_frame(head + (_recv_exact(sock, 8 * n) if n else b""))


# ---------------------------------------------------------------------------
# site side
# ---------------------------------------------------------------------------

class Site:
    """Private state and local kernels of one institution.

    ``handle`` answers a QUERY with a PARTIAL frame and applies CONTROL frames
    silently.  Site-local vectors (residual, dual point, ...) never leave.
    """

    def __init__(self, shard: SiteShard, partition: GroupPartition):
        if shard.matrix.shape[1] != partition.n_features:
            raise ValueError("shard width does not match partition")
        self.index = shard.site_index
        self.A = shard.matrix
        self.y = shard.response
        self.partition = partition
        self.x = np.zeros(partition.n_features)
        self.R = -self.y.copy()
        self.slots = {}
        self.aggregates = {}
        self.stopped = False

    @property
    def local_rows(self) -> int:
        return self.A.shape[0]

    def handle(self, frame: LqmFrame) -> LqmFrame | None:
        if frame.msg_type == MsgType.AGGREGATE:
            self.aggregates[frame.op_code] = frame.payload
            return None
        if frame.msg_type == MsgType.CONTROL:
            self._control(frame.op_code, frame.payload)
            return None
        if frame.msg_type != MsgType.QUERY:
            raise LqmProtocolError(f"site {self.index} cannot handle msg_type {frame.msg_type}")
        try:
            out = self._query(frame.op_code, frame.payload)
        except Exception as exc:  # reported back to the master as an ERROR frame
            log.error("site %d failed on op %d: %s", self.index, frame.op_code, exc)
            return LqmFrame(MsgType.CONTROL, frame.request_id, self.index, Op.ERROR)
        return LqmFrame(MsgType.PARTIAL, frame.request_id, self.index, frame.op_code, out)

    def _control(self, op, payload):
        if op == Op.APPLY_BLOCK:
            s, e = int(payload[0]), int(payload[1])
            new = payload[2:]
            delta = new - self.x[s:e]
            self.x[s:e] = new
            kern.residual_update(self.A, self.R, s, e, delta)
        elif op == Op.SET_MODEL:
            self.x = np.array(payload, dtype=np.float64)
            self.R = self.A @ self.x - self.y
        elif op == Op.SHUTDOWN:
            self.stopped = True
        elif op == Op.ERROR:
            log.warning("site %d: master aborted the current round", self.index)
        else:
            raise LqmProtocolError(f"unknown control op {op}")

    def _query(self, op, payload):
        A, y = self.A, self.y
        if op == Op.CORRELATION:
            return A.T @ y
        if op == Op.GROUP_GRAM:
            s, e = int(payload[0]), int(payload[1])
            return (A[:, s:e].T @ A[:, s:e]).ravel()
        if op == Op.SQNORM:
            v = self.R if int(payload[0]) == Slot.RESIDUAL else self.slots[Slot(int(payload[0]))]
            return [float(v @ v)]
        if op == Op.GRADIENT:
            return kern.group_grad(A, self.R, int(payload[0]), int(payload[1]))
        if op == Op.RESIDUAL_STATS:
            return kern.residual_stats(self.R, y)
        if op == Op.RESIDUAL_CORR:
            return kern.residual_corr(A, self.R, self.partition.offsets)
        if op == Op.DUAL_SETUP:
            lam_prev, lam_next, at_max, lam_max = payload[:4]
            if at_max:
                s, e = int(payload[4]), int(payload[5])
                theta = y / lam_max
                v1 = A[:, s:e] @ payload[6:]
            else:
                theta = -self.R / lam_prev
                v1 = y / lam_prev - theta
            v2 = y / lam_next - theta
            self.slots.update({Slot.THETA: theta, Slot.V1: v1, Slot.V2: v2})
            return [float(v1 @ v1), float(v1 @ v2)]
        if op == Op.PROJECT:
            perp = self.slots[Slot.V2] - payload[0] * self.slots[Slot.V1]
            self.slots[Slot.V2_PERP] = perp
            return [float(perp @ perp)]
        if op == Op.SCREEN_CORR:
            return A.T @ (self.slots[Slot.THETA] + 0.5 * self.slots[Slot.V2_PERP])
        if op == Op.AUDIT:
            return [float(np.max(np.abs(self.R - (A @ self.x - y)), initial=0.0))]
        raise LqmProtocolError(f"unknown query op {op}")


# ---------------------------------------------------------------------------
# transports
# ---------------------------------------------------------------------------

class InProcessTransport:
    """Lossless FIFO links to in-memory sites.

    ``fail_sites`` simulates sites that stop answering (fault injection for
    error-path tests).
    """

    kind = "in_process"

    def __init__(self, sites, fail_sites=()):
        self.sites = sorted(sites, key=lambda s: s.index)
        if [s.index for s in self.sites] != list(range(len(self.sites))):
            raise ValueError("site indices must be 0..m-1")
        self.fail_sites = set(fail_sites)
        self._inbox = [deque() for _ in self.sites]

    @property
    def site_count(self):
        return len(self.sites)

    def send(self, site, frame):
        if site in self.fail_sites:
            return
        reply = self.sites[site].handle(frame)
        if reply is not None:
            self._inbox[site].append(reply)

    def recv(self, site, timeout=None):
        if not self._inbox[site]:
            raise TimeoutError(f"site {site} has no pending reply")
        return self._inbox[site].popleft()

    def close(self):
        pass


class TcpTransport:
    """Persistent TCP connections to remote site services."""

    kind = "tcp"

    def __init__(self, addresses, timeout=DEFAULT_TIMEOUT, connect_timeout=10.0):
        self.addresses = [_parse_addr(a) for a in addresses]
        self.timeout = timeout
        self.socks = []
        for host, port in self.addresses:
            s = socket.create_connection((host, port), timeout=connect_timeout)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.settimeout(timeout)
            self.socks.append(s)

    @property
    def site_count(self):
        return len(self.socks)

    def send(self, site, frame):
        try:
            self.socks[site].sendall(encode_frame(frame))
        except OSError as exc:
            raise LqmConnectionError(f"site {site}: {exc}") from exc

    def recv(self, site, timeout=None):
        sock = self.socks[site]
        sock.settimeout(timeout or self.timeout)
        try:
            return read_frame(sock)
        except socket.timeout as exc:
            raise TimeoutError(f"site {site} timed out") from exc
        except OSError as exc:
            raise LqmConnectionError(f"site {site}: {exc}") from exc

    def close(self):
        for s in self.socks:
            try:
                s.close()
            except OSError:
                pass


def _parse_addr(addr):
    if isinstance(addr, tuple):
        return addr
    host, _, port = str(addr).rpartition(":")
    return host or "127.0.0.1", int(port)


# ---------------------------------------------------------------------------
# master side
# ---------------------------------------------------------------------------

class Transcript:
    """Tap recording every frame the master sends or receives, in order."""

    def __init__(self):
        self.frames = []

    def __call__(self, frame):
        self.frames.append(frame)

    def to_bytes(self) -> bytes:
        return b"".join(encode_frame(f) for f in self.frames)

    def dump(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())


class Master:
    """Coordinator of one session: issues queries, sums partials in site order."""

    def __init__(self, transport, taps=(), timeout=DEFAULT_TIMEOUT):
        self.transport = transport
        self.taps = list(taps)
        self.timeout = timeout
        self._rid = 0

    @property
    def site_count(self) -> int:
        return self.transport.site_count

    def describe(self) -> str:
        return f"{self.transport.kind}:{self.site_count}"

    def _next_id(self):
        self._rid += 1
        return self._rid

    def _send(self, site, frame):
        for tap in self.taps:
            tap(frame)
        self.transport.send(site, frame)

    def _broadcast(self, msg_type, op, payload=()):
        rid = self._next_id()
        frame = LqmFrame(msg_type, rid, MASTER, op, payload)
        for i in range(self.site_count):
            self._send(i, frame)

    def query(self, op, payload=()) -> list:
        """Send one QUERY to every site and collect their partials in site order."""
        rid = self._next_id()
        frame = LqmFrame(MsgType.QUERY, rid, MASTER, op, payload)
        for i in range(self.site_count):
            self._send(i, frame)
        replies, missing = [], set()
        for i in range(self.site_count):
            try:
                reply = self.transport.recv(i, self.timeout)
            except TimeoutError:
                missing.add(i)
                continue
            for tap in self.taps:
                tap(reply)
            replies.append(reply)
        if missing:
            raise LqmTimeout(missing)
        for i, reply in enumerate(replies):
            if reply.msg_type == MsgType.CONTROL and reply.op_code == Op.ERROR:
                raise LqmProtocolError(f"site {i} reported an error for op {Op(op).name}")
            if (reply.msg_type, reply.request_id, reply.site_index, reply.op_code) != \
                    (MsgType.PARTIAL, rid, i, op):
                raise LqmProtocolError(f"unexpected reply from site {i}: {reply}")
        return [r.payload for r in replies]

    def lqm_sum(self, op, payload=(), broadcast=True) -> np.ndarray:
        """Query all sites, sum partials in ascending site order, optionally broadcast the sum."""
        partials = self.query(op, payload)
        if len({len(p) for p in partials}) != 1:
            self._broadcast(MsgType.CONTROL, Op.ERROR)
            raise LqmProtocolError(f"partial lengths differ for op {Op(op).name}: "
                                   f"{[len(p) for p in partials]}")
        total = lqm_sum(partials)
        if broadcast:
            self._broadcast(MsgType.AGGREGATE, op, total)
        return total

    def control(self, op, payload=()):
        self._broadcast(MsgType.CONTROL, op, payload)

    def close(self):
        try:
            self.control(Op.SHUTDOWN)
        except LqmError:
            pass
        self.transport.close()


def lqm_sum(site_partials) -> np.ndarray:
    """Ascending-site-order sum of equal-length partial vectors."""
    try:
        return ordered_sum(site_partials)
    except ValueError as exc:
        raise LqmProtocolError(str(exc)) from exc


def in_process_master(shards, partition, taps=(), fail_sites=()) -> Master:
    sites = [Site(s, partition) for s in shards]
    return Master(InProcessTransport(sites, fail_sites), taps)


# ---------------------------------------------------------------------------
# TCP site service
# ---------------------------------------------------------------------------

def run_site(shard: SiteShard, partition: GroupPartition, host="127.0.0.1", port=0, listener=None):
    """Serve one master connection until SHUTDOWN or disconnect."""
    site = Site(shard, partition)
    srv = listener or socket.create_server((host, port))
    conn, _ = srv.accept()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        while not site.stopped:
            try:
                frame = read_frame(conn)
            except LqmConnectionError:
                log.info("site %d: master disconnected", site.index)
                break
            reply = site.handle(frame)
            if reply is not None:
                conn.sendall(encode_frame(reply))
    finally:
        conn.close()
        srv.close()
    return site


class SiteThread(threading.Thread):
    """A site service on a background thread (tests, ``sites`` command)."""

    def __init__(self, shard, partition, host="127.0.0.1", port=0):
        super().__init__(daemon=True)
        self.listener = socket.create_server((host, port))
        self.address = self.listener.getsockname()[:2]
        self.args_ = (shard, partition, host)
        self.site = None
        self.error = None

    def run(self):
        shard, partition, host = self.args_
        try:
            self.site = run_site(shard, partition, host, listener=self.listener)
        except Exception as exc:  # surfaced through .error
            self.error = exc


def tcp_master(threads, taps=(), timeout=DEFAULT_TIMEOUT) -> Master:
    return Master(TcpTransport([t.address for t in threads], timeout), taps, timeout)
