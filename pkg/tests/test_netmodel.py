import numpy as np
import pytest

from fdamerge.errors import (
    ArchitectureMismatchError,
    FormatViolationError,
    ShapeMismatchError,
    ZeroNormError,
)
from fdamerge.netmodel import (
    ACT_TANH,
    AffineBlock,
    Checkpoint,
    DistKind,
    FfnBlock,
    Network,
    apply_task_vectors,
    block_dist,
    block_is_residual,
    checkpoints_allclose,
    flatten_block,
    forward_block,
    load_checkpoint,
    load_task_vector,
    save_checkpoint,
    save_task_vector,
    snap_to_base,
    task_vector,
)


class TestForwardBlock:
    def test_identity_affine(self):
        blk = AffineBlock(np.eye(3), np.zeros(3))
        x = np.array([1.0, -2.0, 0.5])
        assert np.array_equal(forward_block(blk, x), x)

    def test_hand_value(self):
        blk = AffineBlock(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
        assert np.array_equal(forward_block(blk, np.array([1.0, 1.0])), [4.0, 8.0])

    def test_ffn_bias_passthrough(self):
        blk = FfnBlock(np.zeros((4, 3)), np.zeros(4), ACT_TANH, np.zeros((2, 4)),
                       np.array([5.0, -1.0]))
        assert np.array_equal(forward_block(blk, np.ones(3)), [5.0, -1.0])

    def test_batch_columns(self, np_rng):
        blk = AffineBlock(np_rng.normal(size=(3, 4)), np_rng.normal(size=3))
        xb = np_rng.normal(size=(4, 6))
        out = forward_block(blk, xb)
        assert out.shape == (3, 6)
        assert np.allclose(out[:, 2], forward_block(blk, xb[:, 2]))

    def test_shape_mismatch(self):
        blk = AffineBlock(np.eye(3), np.zeros(3))
        with pytest.raises(ShapeMismatchError):
            forward_block(blk, np.ones(4))

    def test_finite_fuzz(self, np_rng):
        for _ in range(20):
            blk = FfnBlock(np_rng.normal(size=(5, 3)), np_rng.normal(size=5), ACT_TANH,
                           np_rng.normal(size=(4, 5)), np_rng.normal(size=4))
            out = forward_block(blk, 100.0 * np_rng.normal(size=3))
            assert np.all(np.isfinite(out))


class TestBlockDist:
    @pytest.mark.parametrize("kind", list(DistKind))
    def test_identity_zero(self, np_rng, kind):
        y = np_rng.normal(size=5)
        assert block_dist(kind, y, y) == pytest.approx(0.0, abs=1e-15)

    def test_l2_hand(self):
        assert block_dist(DistKind.L2, np.zeros(2), np.array([3.0, 4.0])) == pytest.approx(12.5)

    def test_l1_hand(self):
        assert block_dist(DistKind.L1, np.array([1.0, 2.0]), np.array([2.0, 0.0])) == pytest.approx(3.0)

    @pytest.mark.parametrize("kind", list(DistKind))
    def test_symmetry(self, np_rng, kind):
        for _ in range(10):
            a, b = np_rng.normal(size=(2, 6))
            assert block_dist(kind, a, b) == pytest.approx(block_dist(kind, b, a), abs=1e-14)

    def test_cosine_zero_norm(self):
        with pytest.raises(ZeroNormError):
            block_dist(DistKind.COSINE, np.zeros(3), np.ones(3))


class TestTaskVector:
    def test_zero_for_identical(self, checkpoint_pair):
        theta0, _ = checkpoint_pair
        tv = task_vector(theta0, theta0)
        assert all(not np.any(p) for blk in tv.deltas for _, p in blk.param_items())

    def test_scalar_delta(self):
        a = Checkpoint([AffineBlock(np.array([[5.0]]), np.array([0.0]))])
        b = Checkpoint([AffineBlock(np.array([[2.0]]), np.array([0.0]))])
        assert task_vector(a, b).deltas[0].w[0, 0] == 3.0

    def test_roundtrip_bitwise_after_snap(self, checkpoint_pair):
        theta0, theta1 = checkpoint_pair
        snapped = snap_to_base(theta0, theta1)
        tv = task_vector(snapped, theta0)
        rebuilt = apply_task_vectors(theta0, [tv], [1.0])
        assert checkpoints_allclose(rebuilt, snapped)

    def test_architecture_mismatch(self, checkpoint_pair):
        theta0, _ = checkpoint_pair
        other = Checkpoint([theta0.blocks[0]])
        with pytest.raises(ArchitectureMismatchError):
            task_vector(theta0, other)


class TestNetwork:
    def test_residual_rule(self, checkpoint_pair):
        theta0, _ = checkpoint_pair
        assert not block_is_residual(theta0.blocks[0])
        assert block_is_residual(theta0.blocks[1])

    def test_encode_applies_residual(self, checkpoint_pair, np_rng):
        theta0, _ = checkpoint_pair
        net = theta0.network()
        x = np_rng.normal(size=16)
        h1 = np.tanh(forward_block(theta0.blocks[0], x))
        expected = h1 + forward_block(theta0.blocks[1], h1)
        assert np.allclose(net.encode(x), expected)

    def test_block_inputs(self, checkpoint_pair, np_rng):
        theta0, _ = checkpoint_pair
        net = theta0.network()
        x = np_rng.normal(size=(16, 5))
        ins = net.block_inputs(x)
        assert np.array_equal(ins[0], x)
        assert ins[1].shape == (32, 5)

    def test_chain_validation(self):
        with pytest.raises(ArchitectureMismatchError):
            Network([AffineBlock(np.zeros((3, 2)), np.zeros(3)),
                     AffineBlock(np.zeros((2, 4)), np.zeros(2))])


class TestSerialization:
    def test_checkpoint_roundtrip_bitwise(self, checkpoint_pair, tmp_path):
        theta0, _ = checkpoint_pair
        path = tmp_path / "a.ckpt"
        save_checkpoint(theta0, path)
        loaded = load_checkpoint(path)
        assert checkpoints_allclose(theta0, loaded)
        save_checkpoint(loaded, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_task_vector_roundtrip(self, checkpoint_pair, tmp_path):
        theta0, theta1 = checkpoint_pair
        tv = task_vector(theta1, theta0)
        save_task_vector(tv, tmp_path / "t.tv")
        loaded = load_task_vector(tmp_path / "t.tv")
        for a, b in zip(tv.deltas, loaded.deltas):
            for (_, pa), (_, pb) in zip(a.param_items(), b.param_items()):
                assert np.array_equal(pa, pb)

    def test_bad_magic(self, checkpoint_pair, tmp_path):
        theta0, _ = checkpoint_pair
        path = tmp_path / "a.ckpt"
        save_checkpoint(theta0, path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatViolationError):
            load_checkpoint(path)

    def test_truncated(self, checkpoint_pair, tmp_path):
        theta0, _ = checkpoint_pair
        path = tmp_path / "a.ckpt"
        save_checkpoint(theta0, path)
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(FormatViolationError):
            load_checkpoint(path)

    def test_crc_flip_detected(self, checkpoint_pair, tmp_path):
        theta0, _ = checkpoint_pair
        path = tmp_path / "a.ckpt"
        save_checkpoint(theta0, path)
        raw = bytearray(path.read_bytes())
        raw[50] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatViolationError):
            load_checkpoint(path)

    def test_wrong_magic_kind(self, checkpoint_pair, tmp_path):
        theta0, theta1 = checkpoint_pair
        save_task_vector(task_vector(theta1, theta0), tmp_path / "t.tv")
        with pytest.raises(FormatViolationError):
            load_checkpoint(tmp_path / "t.tv")


class TestSnap:
    def test_snap_bitwise_roundtrip_stress(self, np_rng):
        # adversarial scales: tiny thetas with large movement
        w0 = np_rng.normal(0, 0.5, (20, 20))
        wi = np_rng.normal(0, 1e-4, (20, 20))
        t0 = Checkpoint([AffineBlock(w0, np.zeros(20))])
        t1 = Checkpoint([AffineBlock(wi, np.zeros(20))])
        snapped = snap_to_base(t0, t1)
        tv = task_vector(snapped, t0)
        rebuilt = apply_task_vectors(t0, [tv], [1.0])
        assert checkpoints_allclose(rebuilt, snapped)
        assert np.max(np.abs(snapped.blocks[0].w - wi)) <= 1e-15

    def test_flatten_block_order(self):
        blk = AffineBlock(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([5.0, 6.0]))
        assert np.array_equal(flatten_block(blk), [1, 2, 3, 4, 5, 6])
