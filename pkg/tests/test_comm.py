import struct
import time

import numpy as np
import pytest

from dsmpnn.comm import (HEADER, WIRE_MAGIC, Channel, CommError, CommTimeout, ContractError, Message, Tag,
                         WorkerGroup, decode_frame, encode_frame)
from dsmpnn.partition import decompose

TRANSPORTS = [("queue", "thread"), ("socket", "thread"), ("socket", "process")]


def run(n, fn, *args, transport="queue", launcher="thread", timeout=10.0):
    return WorkerGroup(n, transport, launcher, timeout).run(fn, *args)


class TestWireFormat:
    def test_header_layout(self):
        msg = Message(Tag(7, 9, 3, Channel.DECODED), 1, 2, np.arange(3, dtype=np.float32))
        frame = encode_frame(msg)
        assert HEADER.size == 28
        magic, epoch, sample, hop, chan, prec, src, dst, n = struct.unpack_from("<IIIHBBHHQ", frame)
        assert (magic, epoch, sample, hop, chan, prec, src, dst, n) == (WIRE_MAGIC, 7, 9, 3, 1, 0, 1, 2, 12)
        assert frame[:4] == b"PMSD"  # 0x44534D50 little-endian
        np.testing.assert_array_equal(np.frombuffer(frame[28:], "<f4"), [0, 1, 2])

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip_self_delimiting(self, dtype):
        a = Message(Tag(1, 2, 0, Channel.GRAD), 0, 1, np.linspace(0, 1, 5).astype(dtype))
        b = Message(Tag(1, 3, 0, Channel.LOSS), 1, 0, np.array([4.0], dtype=dtype))
        buf = encode_frame(a) + encode_frame(b)
        m1, used = decode_frame(buf)
        m2, used2 = decode_frame(buf[used:])
        assert used + used2 == len(buf)
        assert m1.tag == a.tag and m2.tag == b.tag and m1.payload.dtype == dtype
        np.testing.assert_array_equal(m1.payload, a.payload)

    def test_bad_magic(self):
        frame = bytearray(encode_frame(Message(Tag(0, 0, 0, Channel.CTRL), 0, 1, np.zeros(1))))
        frame[0] ^= 0xFF
        with pytest.raises(CommError):
            decode_frame(bytes(frame))

    def test_extents_contract(self):
        with pytest.raises(ContractError):
            Message(Tag(0, 0, 0, Channel.CTRL), 0, 1, np.zeros(6), extents=(4, 2))


def _exchange_worker(comm, pts, l):
    plan = decompose(pts, comm.n_proc, l)
    view = plan.rank_view(comm.rank)
    # every rank fills interior rows with 100*rank + global id, halo rows with -1
    vals = np.full((len(view.local_ids), 2), -1.0)
    vals[:view.n_interior, 0] = 100 * comm.rank + view.local_ids[:view.n_interior]
    vals[:view.n_interior, 1] = comm.rank
    out = comm.halo_exchange(view, vals, Tag(0, 0, 0, Channel.LATENT))
    return view.local_ids, vals, out, plan.owner


class TestHaloExchange:
    def test_single_rank_noop(self, rng):
        pts = rng.uniform(size=(10, 2))
        ids, before, after, _ = run(1, _exchange_worker, pts, 0.2)[0]
        np.testing.assert_array_equal(before, after)

    def test_two_rank_hand_trace(self):
        # rank 0 owns x=0.45 which lies in rank 1's halo; rank 1 must see 7 there
        pts = np.array([[0.1, 0.5], [0.45, 0.5], [0.55, 0.5], [0.9, 0.5]])

        def worker(comm):
            plan = decompose(pts, 2, 0.2)
            view = plan.rank_view(comm.rank)
            vals = np.zeros((len(view.local_ids), 1))
            if comm.rank == 0:
                vals[view.local_ids == 1] = 7.0
            out = comm.halo_exchange(view, vals, Tag(0, 0, 0, Channel.DECODED))
            return dict(zip(view.local_ids.tolist(), out[:, 0].tolist()))

        r0, r1 = run(2, worker)
        assert r0 == {0: 0.0, 1: 7.0, 2: 0.0}
        assert r1 == {2: 0.0, 3: 0.0, 1: 7.0}

    @pytest.mark.parametrize("transport,launcher", TRANSPORTS)
    def test_halo_rows_come_from_owners(self, rng, transport, launcher):
        pts = rng.uniform(size=(200, 2))
        results = run(4, _exchange_worker, pts, 0.2, transport=transport, launcher=launcher)
        for rank, (ids, before, after, owner) in enumerate(results):
            n_int = int(np.sum(owner[ids] == rank))
            np.testing.assert_array_equal(after[:n_int], before[:n_int])
            np.testing.assert_array_equal(after[n_int:, 0], 100 * owner[ids[n_int:]] + ids[n_int:])
            np.testing.assert_array_equal(after[n_int:, 1], owner[ids[n_int:]])

    def test_shape_contract(self, rng):
        pts = rng.uniform(size=(50, 2))

        def worker(comm):
            view = decompose(pts, 2, 0.2).rank_view(comm.rank)
            comm.halo_exchange(view, np.zeros((len(view.local_ids) + 1, 1)), Tag(0, 0, 0, Channel.LATENT))

        with pytest.raises(ContractError):
            run(2, worker)


class TestAllreduce:
    @pytest.mark.parametrize("transport,launcher", TRANSPORTS)
    def test_sum(self, transport, launcher):
        def worker(comm):
            local = np.array([1.0, 2.0]) if comm.rank == 0 else np.array([3.0, 4.0])
            return comm.allreduce_sum(local, Tag(0, 0, 0, Channel.GRAD))

        for out in run(2, worker, transport=transport, launcher=launcher):
            np.testing.assert_array_equal(out, [4, 6])

    def test_single_rank_identity(self):
        out = run(1, lambda comm: comm.allreduce_sum(np.array([1.5, -2.0]), Tag(0, 0, 0, Channel.GRAD)))[0]
        np.testing.assert_array_equal(out, [1.5, -2.0])

    def test_ascending_rank_order_and_arrival_independence(self):
        vals = np.random.default_rng(0).normal(size=(4, 1000)) * 10.0 ** np.arange(-3, 1)[:, None]
        expect = ((vals[0] + vals[1]) + vals[2]) + vals[3]

        def worker(comm, delays):
            time.sleep(delays[comm.rank])
            return comm.allreduce_sum(vals[comm.rank], Tag(0, 0, 0, Channel.GRAD))

        for delays in ([0, 0.05, 0.1, 0.15], [0.15, 0.1, 0.05, 0]):
            for out in run(4, worker, delays):
                assert out.tobytes() == expect.tobytes()

    def test_length_mismatch(self):
        def worker(comm):
            return comm.allreduce_sum(np.zeros(2 + comm.rank), Tag(0, 0, 0, Channel.GRAD))

        with pytest.raises(ContractError):
            run(2, worker)

    def test_repeatable(self):
        vals = np.random.default_rng(1).normal(size=(4, 64)).astype(np.float32)

        def worker(comm):
            return comm.allreduce_sum(vals[comm.rank], Tag(0, 0, 0, Channel.GRAD))

        a = run(4, worker)[0]
        b = run(4, worker)[0]
        assert a.tobytes() == b.tobytes()


class TestReduceLoss:
    def test_global_mean(self):
        def worker(comm):
            sse, count = [(2.0, 1.0), (6.0, 3.0)][comm.rank]
            return comm.reduce_loss(sse, count, Tag(0, 0, 0, Channel.LOSS))

        assert run(2, worker) == [(2.0, 4.0), (2.0, 4.0)]

    def test_single_rank(self):
        assert run(1, lambda c: c.reduce_loss(9.0, 3.0, Tag(0, 0, 0, Channel.LOSS)))[0] == (3.0, 3.0)

    def test_equals_unpartitioned_mse(self, rng):
        pts = rng.uniform(size=(120, 2))
        err = rng.normal(size=120)

        def worker(comm):
            plan = decompose(pts, comm.n_proc, 0.1)
            mine = plan.interior_ids[comm.rank]
            return comm.reduce_loss(float(np.sum(err[mine] ** 2)), float(len(mine)), Tag(0, 0, 0, Channel.LOSS))

        loss, count = run(4, worker)[0]
        assert count == 120
        assert loss == pytest.approx(np.mean(err ** 2), rel=1e-14)

    def test_zero_count(self):
        with pytest.raises(ContractError):
            run(2, lambda c: c.reduce_loss(0.0, 0.0, Tag(0, 0, 0, Channel.LOSS)))


class TestBarrier:
    def test_single_rank(self):
        t0 = time.monotonic()
        run(1, lambda c: c.barrier(Tag(0, 0, 0, Channel.CTRL)))
        assert time.monotonic() - t0 < 1.0

    def test_staggered_release(self):
        def worker(comm):
            time.sleep(0.05 * comm.rank)
            arrive = time.monotonic()
            comm.barrier(Tag(0, 0, 0, Channel.CTRL))
            return arrive, time.monotonic()

        out = run(4, worker)
        assert min(r for _, r in out) >= max(a for a, _ in out)

    def test_mismatched_tags_time_out(self):
        def worker(comm):
            comm.barrier(Tag(0, comm.rank, 0, Channel.CTRL))

        with pytest.raises(CommTimeout):
            run(2, worker, timeout=0.5)

    def test_timeout_names_missing_rank(self):
        def worker(comm):
            if comm.rank != 2:
                comm.barrier(Tag(0, 0, 0, Channel.CTRL))

        with pytest.raises(CommTimeout, match=r"\[2\]"):
            run(3, worker, timeout=0.5)


class TestWorkerGroup:
    def test_results_in_rank_order(self):
        assert run(4, lambda c: c.rank * 10) == [0, 10, 20, 30]

    def test_failure_propagates_and_aborts_peers(self):
        def worker(comm):
            if comm.rank == 1:
                raise KeyError("boom")
            comm.barrier(Tag(0, 0, 0, Channel.CTRL))

        t0 = time.monotonic()
        with pytest.raises(KeyError):
            run(3, worker, timeout=30)
        assert time.monotonic() - t0 < 5

    def test_invalid_configuration(self):
        with pytest.raises(ValueError):
            WorkerGroup(2, "queue", "process")
        with pytest.raises(ValueError):
            WorkerGroup(0)

    def test_counters(self):
        def worker(comm):
            comm.allreduce_sum(np.zeros(10), Tag(0, 0, 0, Channel.GRAD))
            return comm.bytes_sent, dict(comm.payload_bytes), comm.messages_sent

        sent, payload, msgs = run(2, worker)[0]
        assert sent == HEADER.size + 80 and payload == {Channel.GRAD: 80} and msgs == 1


class TestDetach:
    def test_received_halo_rows_get_no_gradient(self, rng):
        from dsmpnn import autodiff as ad
        from dsmpnn.autodiff import Tape, Tensor
        pts = rng.uniform(size=(80, 2))

        def worker(comm):
            view = decompose(pts, comm.n_proc, 0.2).rank_view(comm.rank)
            x = Tensor(np.random.default_rng(comm.rank).normal(size=(len(view.local_ids), 3)), requires_grad=True)
            with Tape() as tape:
                got = comm.halo_exchange(view, x.data, Tag(0, 0, 0, Channel.LATENT))
                y = ad.overwrite_rows(x, view.halo_pos, got[view.halo_pos])
                loss = ad.tsum(ad.mul(y, y))
            tape.backward(loss)
            return view.n_interior, x.data, x.grad

        for n_int, x, g in run(4, worker):
            np.testing.assert_array_equal(g[n_int:], 0.0)
            np.testing.assert_allclose(g[:n_int], 2 * x[:n_int])
