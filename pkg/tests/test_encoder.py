import numpy as np
import pytest

from ipsel.errors import ContractError, ModeError
from ipsel.grad import StreamSet, Tensor, engine
from ipsel.model import EncoderConfig, PatchEncoder


def make_encoder(base=4, in_channels=1, seed=0):
    return PatchEncoder(EncoderConfig(in_channels=in_channels, base_channels=base),
                        StreamSet(seed))


class TestShapes:
    def test_default_width_gives_128_features(self):
        enc = make_encoder(base=64)
        assert enc.feature_dim == 128
        x = np.random.default_rng(0).random((7, 1, 20, 20)).astype(np.float32)
        with engine.no_grad(), engine.eval_mode():
            out = enc.embed(x, grad=False)
        assert out.shape == (7, 128)

    def test_feature_dim_tracks_width(self):
        assert make_encoder(base=4).feature_dim == 8

    def test_param_count_independent_of_patch_size(self):
        enc = make_encoder(base=4)
        n_params = sum(p.size for _, p in enc.named_params())
        with engine.no_grad(), engine.eval_mode():
            for side in (8, 16, 25, 50):
                x = np.zeros((2, 1, side, side), dtype=np.float32)
                out = enc.embed(x, grad=False)
                assert out.shape == (2, 8)
        assert n_params == sum(p.size for _, p in enc.named_params())

    def test_too_small_patch_rejected(self):
        enc = make_encoder()
        with engine.no_grad(), engine.eval_mode():
            with pytest.raises(ContractError, match="minimum"):
                enc.embed(np.zeros((1, 1, 3, 3), dtype=np.float32), grad=False)

    def test_channel_mismatch_rejected(self):
        enc = make_encoder(in_channels=1)
        with engine.no_grad(), engine.eval_mode():
            with pytest.raises(ContractError):
                enc.embed(np.zeros((1, 2, 8, 8), dtype=np.float32), grad=False)


class TestEvalSemantics:
    def test_eval_forward_bit_deterministic(self):
        enc = make_encoder()
        x = np.random.default_rng(1).random((5, 1, 12, 12)).astype(np.float32)
        with engine.no_grad(), engine.eval_mode():
            a = enc.embed(x, grad=False).data
            b = enc.embed(x, grad=False).data
        assert np.array_equal(a, b)

    def test_batch_independence_bitwise(self):
        enc = make_encoder()
        rng = np.random.default_rng(2)
        x = rng.random((6, 1, 10, 10)).astype(np.float32)
        with engine.no_grad(), engine.eval_mode():
            full = enc.embed(x, grad=False).data
            alone = enc.embed(x[2:3], grad=False).data
            pair = enc.embed(x[[2, 5]], grad=False).data
        assert np.array_equal(full[2], alone[0])
        assert np.array_equal(full[2], pair[0])
        assert np.array_equal(full[5], pair[1])

    def test_fused_path_matches_primitive_path_bitwise(self):
        enc = make_encoder()
        x = np.random.default_rng(3).random((4, 1, 14, 14)).astype(np.float32)
        with engine.no_grad(), engine.eval_mode():
            fused = enc.embed(x, grad=False).data
            primitive = enc(Tensor(x)).data
        assert np.array_equal(fused, primitive)

    def test_no_grad_required_for_eval_embed(self):
        enc = make_encoder()
        with engine.eval_mode():
            with pytest.raises(ModeError, match="no-gradient"):
                enc.embed(np.zeros((1, 1, 8, 8), dtype=np.float32), grad=False)

    def test_train_embed_records_tape(self):
        enc = make_encoder()
        x = np.random.default_rng(4).random((2, 1, 8, 8)).astype(np.float32)
        with engine.fresh_tape() as tape, engine.train_mode():
            out = enc.embed(x, grad=True)
            assert out.requires_grad
            assert len(tape) > 0

    def test_train_mode_updates_running_stats(self):
        enc = make_encoder()
        before = enc.stem_bn.running_mean.data.copy()
        x = np.random.default_rng(5).random((4, 1, 8, 8)).astype(np.float32) + 3.0
        with engine.fresh_tape(), engine.train_mode():
            enc.embed(x, grad=True)
        assert not np.array_equal(before, enc.stem_bn.running_mean.data)

    def test_running_stats_not_trainable(self):
        enc = make_encoder()
        trainable = {p.name for p in enc.trainable_params()}
        assert "encoder.stem.bn.running_mean" not in trainable
        assert "encoder.stem.bn.gamma" in trainable

    def test_init_is_seed_deterministic(self):
        a = make_encoder(seed=3)
        b = make_encoder(seed=3)
        c = make_encoder(seed=4)
        for (_, pa), (_, pb) in zip(a.named_params(), b.named_params()):
            assert np.array_equal(pa.data, pb.data)
        assert any(not np.array_equal(pa.data, pc.data)
                   for (_, pa), (_, pc) in zip(a.named_params(), c.named_params()))
