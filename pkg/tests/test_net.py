import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aby2cnn import FixedPointConfig, ProtocolError, TransportError, encode
from aby2cnn.errors import FramingError, HandshakeError
from aby2cnn.net import (HEADER, Frame, Msg, Role, SessionConfig, accept, channel_pair, connect, establish,
                         listener, pack_tensor, provider_upload, push_result, receive_upload, result_download,
                         unpack_tensor)
from aby2cnn.sharing import make_shares


def test_registry_codes():
    assert [m.name for m in Msg] == ["PING", "SHARE_PUSH", "RESHARE", "BOOL_ROUND", "CROSS_REQ", "CROSS_RESP",
                                     "RESULT_PUSH", "ABORT"]
    assert [int(r) for r in Role] == [0, 1, 2, 3, 4]


def test_empty_ping_round_trip():
    raw = Frame(Msg.PING, 0).encode()
    assert raw == struct.pack("<IBQ", 0, 1, 0)
    assert Frame.decode(raw) == Frame(Msg.PING, 0, b"")


@given(st.sampled_from(list(Msg)), st.integers(0, 2**64 - 1), st.binary(max_size=2048))
def test_frame_round_trip(msg, op, payload):
    raw = Frame(int(msg), op, payload).encode()
    assert len(raw) == HEADER.size + len(payload)
    assert Frame.decode(raw) == Frame(int(msg), op, payload)


def test_frame_errors():
    raw = Frame(Msg.RESHARE, 3, b"abcd").encode()
    with pytest.raises(FramingError):
        Frame.decode(raw[:-1])
    with pytest.raises(FramingError):
        Frame.decode(raw[:5])
    with pytest.raises(FramingError):
        Frame(99, 0).encode()
    with pytest.raises(FramingError):
        Frame.decode(struct.pack("<IBQ", 0, 42, 0))


def test_channel_send_recv():
    a, b = channel_pair()
    a.send(Msg.RESHARE, 7, b"hello")
    assert b.recv(Msg.RESHARE, 7) == b"hello"
    assert a.stats.frames_sent == 1 and b.stats.bytes_recv == HEADER.size + 5


def test_interleaved_op_ids():
    a, b = channel_pair()
    a.send(Msg.RESHARE, 1, b"1a")
    a.send(Msg.RESHARE, 2, b"2a")
    a.send(Msg.RESHARE, 1, b"1b")
    assert b.recv(Msg.RESHARE, 2) == b"2a"
    assert b.has_pending()
    assert b.recv(Msg.RESHARE, 1) == b"1a"
    assert b.recv(Msg.RESHARE, 1) == b"1b"
    assert not b.has_pending()


def test_truncated_stream():
    s0, s1 = socket.socketpair()
    from aby2cnn.net import Channel

    rx = Channel(s1, "rx")
    raw = Frame(Msg.RESHARE, 1, b"x" * 32).encode()
    s0.sendall(raw[:-4])
    s0.close()
    with pytest.raises(FramingError):
        rx.recv(Msg.RESHARE, 1)
    assert rx.failed


def test_clean_close_is_transport_error():
    a, b = channel_pair()
    a.close()
    with pytest.raises(TransportError):
        b.recv(Msg.PING)


def test_abort_raises_protocol_error():
    a, b = channel_pair()
    a.abort("boom")
    with pytest.raises(ProtocolError, match="boom"):
        b.recv(Msg.RESHARE, 1)
    assert b.failed
    with pytest.raises(TransportError):
        b.send(Msg.PING)


def test_recorded_frames_replay_in_order():
    log = []
    a, b = channel_pair(transcripts=(None, log))
    for op in (3, 1, 2):
        a.send(Msg.BOOL_ROUND, op, bytes([op]))
    got = [b.recv(Msg.BOOL_ROUND, op) for op in (1, 2, 3)]
    c, d = channel_pair()
    for _, raw in log:
        c.sock.sendall(raw)
    assert [d.recv(Msg.BOOL_ROUND, op) for op in (1, 2, 3)] == got


@given(st.lists(st.integers(1, 4), max_size=3), st.integers(0, 2**32))
def test_tensor_payload_round_trip(shape, seed):
    x = np.random.default_rng(seed).integers(0, 2**64, shape, dtype=np.uint64)
    back, end = unpack_tensor(pack_tensor(x) + b"tail")
    assert np.array_equal(back, x) and back.shape == x.shape
    assert end == len(pack_tensor(x))


def _pair_sessions(cfg_a, cfg_b, expect_a=None, expect_b=None):
    a, b = channel_pair()
    out, errs = [None, None], [None, None]

    def go(i, ch, cfg, exp):
        try:
            out[i] = establish(cfg, ch, exp)
        except Exception as exc:  # noqa: BLE001
            errs[i] = exc

    ts = [threading.Thread(target=go, args=(0, a, cfg_a, expect_a)),
          threading.Thread(target=go, args=(1, b, cfg_b, expect_b))]
    for t in ts:
        t.start()
    for t in ts:
        t.join(5)
    return out, errs


def test_handshake_matching():
    (s0, s1), errs = _pair_sessions(SessionConfig(Role.SERVER0), SessionConfig(Role.SERVER1),
                                    Role.SERVER1, Role.SERVER0)
    assert errs == [None, None]
    assert (s0.peer_role, s1.peer_role) == (Role.SERVER1, Role.SERVER0)


def test_handshake_fixed_point_mismatch():
    _, errs = _pair_sessions(SessionConfig(Role.SERVER0), SessionConfig(Role.SERVER1, fixed_point=FixedPointConfig(16, 2**17)))
    assert all(isinstance(e, HandshakeError) for e in errs)


def test_handshake_session_and_role_checks():
    _, errs = _pair_sessions(SessionConfig(Role.SERVER0, session_id=1), SessionConfig(Role.SERVER1, session_id=2))
    assert all(isinstance(e, HandshakeError) for e in errs)
    _, errs = _pair_sessions(SessionConfig(Role.SERVER0), SessionConfig(Role.HELPER), expect_a=Role.SERVER1)
    assert isinstance(errs[0], HandshakeError)


def test_tcp_connect_accept_and_provider_traffic():
    srv = listener(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    shares = make_shares(encode([1.0, -2.0]), seed=3)
    got = {}

    def server():
        sess = accept(srv, SessionConfig(Role.SERVER1), expect={Role.IMAGE_PROVIDER})
        got["upload"] = receive_upload(sess, 1)
        push_result(sess, got["upload"][1])

    t = threading.Thread(target=server)
    t.start()
    sess = connect(("127.0.0.1", port), SessionConfig(Role.IMAGE_PROVIDER), expect=Role.SERVER1, retry_for=2)
    with pytest.raises(ProtocolError):
        provider_upload(sess, "image", shares[0])  # party 0's share to server 1
    provider_upload(sess, "image", shares[1])
    t.join(5)
    srv.close()
    name, share = got["upload"]
    assert name == "image" and np.array_equal(share.delta_priv, shares[1].delta_priv)
    assert sess.channel.recv(Msg.RESULT_PUSH)[0] == 1


def test_push_to_wrong_role():
    a, b = channel_pair()
    from aby2cnn.net import Session

    s0, _ = make_shares(encode([1.0]), seed=1)
    with pytest.raises(ProtocolError):
        push_result(Session(a, Role.SERVER0, Role.HELPER, SessionConfig(Role.SERVER0)), s0)
    with pytest.raises(ProtocolError):
        provider_upload(Session(a, Role.MODEL_PROVIDER, Role.HELPER, SessionConfig(Role.MODEL_PROVIDER)), "w", s0)


def test_result_download_reconstructs():
    from aby2cnn.net import Session

    shares = make_shares(np.array([7], dtype=np.uint64), seed=2)
    sessions = []
    for i in (0, 1):
        a, b = channel_pair()
        push_result(Session(a, Role(i), Role.IMAGE_PROVIDER, SessionConfig(Role(i))), shares[i])
        sessions.append(Session(b, Role.IMAGE_PROVIDER, Role(i), SessionConfig(Role.IMAGE_PROVIDER)))
    assert result_download(sessions).tolist() == [7]


def test_connect_unreachable():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(TransportError):
        connect(("127.0.0.1", port), SessionConfig(Role.SERVER1, timeout=1))
