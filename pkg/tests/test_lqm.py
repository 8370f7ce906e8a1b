from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedglasso.data import GroupedDesign, make_partition, shard_dataset
from fedglasso.distributed import dsr_mask
from fedglasso.lqm import (HEADER_SIZE, MASTER, FrameError, LqmFrame, LqmProtocolError, LqmTimeout, MsgType, Op,
                           Site, SiteThread, Slot, decode_frame, encode_frame, in_process_master, iter_frames,
                           lqm_sum, tcp_master)
from fedglasso.path import run_path

from lqm_fixtures import GOLDEN_FILE, golden_design, golden_shards, record_dsr

DATA = Path(__file__).parent / "data"


# --- codec ------------------------------------------------------------------------

def test_query_frame_bytes():
    raw = encode_frame(LqmFrame(MsgType.QUERY, 1, MASTER, 7, [1.0]))
    assert raw == bytes.fromhex("4C514D31" "01" "0100000000000000" "FFFF" "0700" "01000000" "000000000000F03F")


def test_empty_control_frame_length():
    raw = encode_frame(LqmFrame(MsgType.CONTROL, 9, MASTER, Op.SHUTDOWN))
    assert len(raw) == HEADER_SIZE == 21
    assert decode_frame(raw).payload.size == 0


payloads = st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=40)


@given(st.sampled_from(list(MsgType)), st.integers(0, 2**64 - 1), st.integers(0, 0xFFFF), st.integers(0, 0xFFFF),
       payloads)
@settings(max_examples=300)
def test_codec_roundtrip_property(mtype, rid, site, op, payload):
    f = LqmFrame(mtype, rid, site, op, payload)
    raw = encode_frame(f)
    assert len(raw) == 21 + 8 * len(payload)
    back = decode_frame(raw)
    assert back == f and encode_frame(back) == raw


def test_codec_fuzz_ten_thousand():
    rng = np.random.default_rng(123)
    frames = []
    for _ in range(10_000):
        n = int(rng.integers(0, 16))
        bits = rng.integers(0, 2**63, size=n, dtype=np.int64).view(np.float64)
        payload = np.where(np.isfinite(bits), bits, 0.0)
        frames.append(LqmFrame(int(rng.integers(1, 5)), int(rng.integers(0, 2**63)), int(rng.integers(0, 0x10000)),
                               int(rng.integers(0, 0x10000)), payload))
    blob = b"".join(encode_frame(f) for f in frames)
    assert list(iter_frames(blob)) == frames


def test_codec_errors():
    good = encode_frame(LqmFrame(MsgType.PARTIAL, 1, 0, 1, [1.0, 2.0]))
    with pytest.raises(FrameError):
        decode_frame(b"XQM1" + good[4:])
    with pytest.raises(FrameError):
        decode_frame(good[:10])
    with pytest.raises(FrameError):
        decode_frame(good[:-8])
    with pytest.raises(FrameError):
        decode_frame(good[:4] + bytes([9]) + good[5:])
    with pytest.raises(FrameError):
        encode_frame(LqmFrame(7, 1, 0, 1))
    with pytest.raises(FrameError):
        encode_frame(LqmFrame(MsgType.PARTIAL, 1, 0, 1, [np.nan]))
    with pytest.raises(FrameError):
        list(iter_frames(good + good[:-3]))


def test_signed_zero_and_subnormals_survive():
    payload = np.array([-0.0, 5e-324, np.finfo(float).max])
    back = decode_frame(encode_frame(LqmFrame(MsgType.PARTIAL, 1, 0, 1, payload))).payload
    assert back.tobytes() == payload.tobytes()


# --- aggregation --------------------------------------------------------------------

def test_lqm_sum_examples():
    assert lqm_sum([np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([-4.0, -6.0])]).tolist() == [0.0, 0.0]
    v = np.array([0.1, 0.2])
    assert lqm_sum([v]).tobytes() == v.tobytes()
    with pytest.raises(LqmProtocolError):
        lqm_sum([np.ones(2), np.ones(3)])


def test_lqm_sum_is_ascending_order():
    parts = [np.array([1e16]), np.array([1.0]), np.array([-1e16])]
    assert lqm_sum(parts)[0] == (1e16 + 1.0) + -1e16


def test_correlation_query_on_identity_shard(identity_example):
    d, p = identity_example
    site = Site(shard_dataset(d, [4])[0], p)
    reply = site.handle(LqmFrame(MsgType.QUERY, 1, MASTER, Op.CORRELATION))
    assert reply.msg_type == MsgType.PARTIAL and reply.payload.tolist() == [3.0, 4.0, 0.0, 0.0]


def test_sqnorm_slot(identity_example):
    d, p = identity_example
    site = Site(shard_dataset(d, [4])[0], p)
    site.slots[Slot.V1] = np.array([3.0, 4.0])
    reply = site.handle(LqmFrame(MsgType.QUERY, 1, MASTER, Op.SQNORM, [Slot.V1]))
    assert reply.payload.tolist() == [25.0]


def test_site_reports_errors():
    d, p = golden_design()
    site = Site(shard_dataset(d, [9])[0], p)
    reply = site.handle(LqmFrame(MsgType.QUERY, 4, MASTER, 999))
    assert reply.op_code == Op.ERROR
    with pytest.raises(LqmProtocolError):
        site.handle(LqmFrame(MsgType.PARTIAL, 4, 0, 1))


def test_request_ids_strictly_increase():
    shards, p = golden_shards()
    raw, _ = record_dsr(lambda taps: in_process_master(shards, p, taps))
    ids = [f.request_id for f in iter_frames(raw) if f.site_index == MASTER]
    assert all(b >= a for a, b in zip(ids, ids[1:]))
    assert len(set(ids)) == 3


def test_golden_dsr_transcript():
    shards, p = golden_shards()
    raw, mask = record_dsr(lambda taps: in_process_master(shards, p, taps))
    assert raw == (DATA / GOLDEN_FILE).read_bytes()
    assert mask.discarded == (0, 2)
    # the broadcast aggregate is the exact integer A^T y
    d, _ = golden_design()
    agg = [f for f in iter_frames(raw) if f.msg_type == MsgType.AGGREGATE]
    assert len(agg) == 3 and agg[0].payload.tolist() == (d.matrix.T @ d.response).tolist()


def test_aggregate_equals_blockwise_single_node():
    rng = np.random.default_rng(4)
    d = GroupedDesign(rng.standard_normal((30, 8)), rng.standard_normal(30))
    p = make_partition([4, 4])
    split = [11, 9, 10]
    m = in_process_master(shard_dataset(d, split), p)
    blocks = [d.matrix[a:b].T @ d.response[a:b] for a, b in [(0, 11), (11, 20), (20, 30)]]
    assert m.lqm_sum(Op.CORRELATION).tobytes() == ((blocks[0] + blocks[1]) + blocks[2]).tobytes()


# --- failure handling -----------------------------------------------------------

def test_timeout_names_missing_sites():
    shards, p = golden_shards()
    m = in_process_master(shards, p, fail_sites={1})
    with pytest.raises(LqmTimeout) as err:
        m.lqm_sum(Op.CORRELATION)
    assert err.value.missing == {1}


def test_length_mismatch_is_protocol_error():
    shards, p = golden_shards()
    m = in_process_master(shards, p)
    m.transport.sites[2].A = m.transport.sites[2].A[:, :4]
    with pytest.raises(LqmProtocolError):
        m.lqm_sum(Op.CORRELATION)


# --- transports -----------------------------------------------------------------

def start_sites(shards, p):
    threads = [SiteThread(s, p) for s in shards]
    for t in threads:
        t.start()
    return threads


def test_tcp_golden_transcript_matches():
    shards, p = golden_shards()
    threads = start_sites(shards, p)
    raw, mask = record_dsr(lambda taps: tcp_master(threads, taps, timeout=10))
    for t in threads:
        t.join(5)
    assert raw == (DATA / GOLDEN_FILE).read_bytes()
    assert all(t.error is None for t in threads)


def test_tcp_and_in_process_identical_path(small_instance):
    d, p = small_instance
    shards = shard_dataset(d, [15, 13, 12])
    local = in_process_master(shards, p)
    a = run_path(local, p, 8, 0.2, solver="dbcd")
    threads = start_sites(shard_dataset(d, [15, 13, 12]), p)
    remote = tcp_master(threads, timeout=10)
    try:
        b = run_path(remote, p, 8, 0.2, solver="dbcd")
    finally:
        remote.close()
    for xa, xb in zip(a.models, b.models):
        assert xa.tobytes() == xb.tobytes()
    assert [m.discarded for m in a.masks] == [m.discarded for m in b.masks]
    assert a.objectives == b.objectives


def test_tcp_silent_site_times_out():
    import socket
    from fedglasso.lqm import Master, TcpTransport
    shards, p = golden_shards()
    threads = start_sites(shards[:2], p)
    silent = socket.create_server(("127.0.0.1", 0))  # accepts connections, never answers
    addrs = [t.address for t in threads] + [silent.getsockname()[:2]]
    m = Master(TcpTransport(addrs, timeout=0.3), timeout=0.3)
    with pytest.raises(LqmTimeout) as err:
        m.lqm_sum(Op.CORRELATION)
    assert err.value.missing == {2}
    m.close()
    silent.close()


def test_tcp_lost_connection():
    from fedglasso.lqm import LqmConnectionError
    shards, p = golden_shards()
    threads = start_sites(shards, p)
    m = tcp_master(threads, timeout=2)
    m.transport.socks[2].close()
    with pytest.raises(LqmConnectionError):
        m.lqm_sum(Op.CORRELATION)
    m.transport.close()


def test_privacy_tap_over_full_path():
    rng = np.random.default_rng(9)
    n_sites = [13, 17, 11]
    N, P = sum(n_sites), 24
    A = rng.standard_normal((N, P))
    x = np.zeros(P)
    x[:6] = rng.standard_normal(6)
    d = GroupedDesign(A, A @ x + 0.3 * rng.standard_normal(N))
    p = make_partition([4] * 6)
    seen = []
    m = in_process_master(shard_dataset(d, n_sites), p, taps=[seen.append])
    run_path(m, p, 15, 0.1, solver="dbcd")
    lengths = {len(f.payload) for f in seen}
    assert not lengths & set(n_sites)
    partial_lengths = {len(f.payload) for f in seen if f.msg_type == MsgType.PARTIAL}
    assert partial_lengths <= {1, 2, 4, 16, P}


def test_dsr_mask_equals_single_node_strong_rule():
    from fedglasso.data import correlation_vector, lambda_max
    from fedglasso.screening import strong_rule_mask
    shards, p = golden_shards()
    d, _ = golden_design()
    from lqm_fixtures import GOLDEN_SPLIT, golden_lambda
    c = p.norms(correlation_vector(d, GOLDEN_SPLIT))
    lm, _ = lambda_max(c, p)
    single = strong_rule_mask(c, p, golden_lambda(), lm)
    assert dsr_mask(in_process_master(shards, p), p, golden_lambda()) == single
