import numpy as np
import pytest

from ipsel.errors import ContractError, LedgerBudgetExceeded
from ipsel.grad import (MemoryLedger, StreamSet, Tensor, engine, load_checkpoint,
                        load_into, named_stream, ops, parameter, save_checkpoint)


class TestLedger:
    def test_alloc_free_balance(self):
        led = MemoryLedger()
        h = led.alloc(1000, "activations")
        assert led.total_live() == 1000
        led.free(h)
        assert led.total_live() == 0
        led.free(h)  # double free is a no-op
        assert led.total_live() == 0

    def test_peak_is_monotone_high_water_mark(self):
        led = MemoryLedger()
        a = led.alloc(100, "activations")
        b = led.alloc(200, "patch_pixels")
        led.free(a)
        led.alloc(50, "embeddings")
        assert led.peak_total == 300
        assert led.peak_by_category["activations"] == 100

    def test_scope_frees_on_exit(self):
        led = MemoryLedger()
        with led.scope():
            led.alloc(400, "activations")
            assert led.total_live() == 400
        assert led.total_live() == 0

    def test_scope_escape_transfers_ownership(self):
        led = MemoryLedger()
        with led.scope():
            with led.scope() as inner:
                h = led.alloc(64, "embeddings")
                inner.escape(h)
            assert led.total_live() == 64  # survived the inner scope
        assert led.total_live() == 0       # freed by the outer scope

    def test_tensor_allocations_tracked(self):
        led = MemoryLedger()
        with engine.use_ledger(led):
            with led.scope():
                t = Tensor(np.zeros((10, 10), dtype=np.float32))
                assert led.live["activations"] == 400
        assert led.total_live() == 0

    def test_untracked_tensor_ignored(self):
        led = MemoryLedger()
        with engine.use_ledger(led):
            Tensor(np.zeros(100, dtype=np.float32), tracked=False)
        assert led.total_live() == 0

    def test_tape_bytes_accrue_and_clear(self):
        led = MemoryLedger()
        x = parameter(np.ones(4), name="x")
        with engine.use_ledger(led), engine.fresh_tape() as tape:
            ops.mul(x, x)
            assert led.live["tape"] > 0
            tape.clear()
            assert led.live["tape"] == 0

    def test_no_tape_bytes_in_no_grad(self):
        led = MemoryLedger()
        x = parameter(np.ones(4), name="x")
        with engine.use_ledger(led), engine.fresh_tape(), engine.no_grad():
            ops.mul(x, x)
        assert led.live["tape"] == 0

    def test_budget_exceeded(self):
        led = MemoryLedger(budget_bytes=100)
        with pytest.raises(LedgerBudgetExceeded):
            led.alloc(101, "activations")


class TestStreams:
    def test_same_name_same_draws(self):
        a = named_stream(7, "init.layer")
        b = named_stream(7, "init.layer")
        assert np.array_equal(a.random(8), b.random(8))

    def test_different_names_independent(self):
        a = named_stream(7, "dropout.block1")
        b = named_stream(7, "dropout.block2")
        assert not np.array_equal(a.random(8), b.random(8))

    def test_different_seeds_differ(self):
        assert not np.array_equal(named_stream(1, "x").random(4),
                                  named_stream(2, "x").random(4))

    def test_order_of_creation_is_irrelevant(self):
        s1 = StreamSet(9)
        first = s1.get("a").random(4)
        s1.get("b").random(4)
        s2 = StreamSet(9)
        s2.get("b").random(4)
        second = s2.get("a").random(4)
        assert np.array_equal(first, second)

    def test_fresh_ignores_consumed_state(self):
        s = StreamSet(9)
        s.get("rps").random(100)
        assert np.array_equal(s.fresh("rps").random(4),
                              named_stream(9, "rps").random(4))


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = [
            ("encoder.w", parameter(rng.normal(size=(3, 4, 3, 3)).astype(np.float32), "encoder.w")),
            ("agg.q", parameter(rng.normal(size=(4, 16)).astype(np.float32), "agg.q")),
            ("f64.check", Tensor(rng.normal(size=7), dtype=np.float64)),
        ]
        path = tmp_path / "ck.bin"
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        for name, t in tensors:
            assert loaded[name].dtype == t.dtype
            assert loaded[name].tobytes() == t.data.tobytes(), name

    def test_header_magic(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(path, [("a", Tensor(np.zeros(2, dtype=np.float32)))])
        assert path.read_bytes()[:4] == b"IPSE"

    def test_double_save_identical_bytes(self, tmp_path):
        t = [("a", Tensor(np.arange(6, dtype=np.float32).reshape(2, 3)))]
        save_checkpoint(tmp_path / "one.bin", t)
        save_checkpoint(tmp_path / "two.bin", t)
        assert (tmp_path / "one.bin").read_bytes() == (tmp_path / "two.bin").read_bytes()

    def test_load_into_checks_names(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(path, [("a", Tensor(np.zeros(2, dtype=np.float32)))])
        target = [("b", Tensor(np.zeros(2, dtype=np.float32)))]
        with pytest.raises(ContractError, match="mismatch"):
            load_into(target, path)

    def test_load_into_checks_shapes(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_checkpoint(path, [("a", Tensor(np.zeros((2, 3), dtype=np.float32)))])
        target = [("a", Tensor(np.zeros((3, 2), dtype=np.float32)))]
        with pytest.raises(ContractError, match="mismatch"):
            load_into(target, path)

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ContractError, match="magic"):
            load_checkpoint(path)
