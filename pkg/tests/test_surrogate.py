import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcvox import surrogate as S
from pcvox.bitcodec import Bitstream, quantize_probability
from pcvox.errors import CheckpointMismatchError, IntegrityError
from pcvox.harness.synth import DatasetSpec, synth_dataset
from pcvox.pcgeom import VoxelCloud, build_octree
from pcvox.sparsenn import Adam, SparseTensor


def random_cloud(rng, n, depth):
    return VoxelCloud.from_coords(rng.integers(0, 1 << depth, (n, 3)), depth)


def blob(rng, depth=6, n=300):
    """A lumpy random-walk cloud with some local structure."""
    steps = rng.integers(-1, 2, (n, 3))
    walk = np.cumsum(steps, axis=0) + (1 << (depth - 1))
    return VoxelCloud.from_coords(np.clip(walk, 0, (1 << depth) - 1), depth)


def zero_model(coarse=2):
    m = S.SurrogateModel(channels=8, coarse_levels=coarse)
    for p in m.parameters():
        p.data[...] = 0
    return m.eval()


@pytest.fixture(scope="module")
def small_model():
    return S.SurrogateModel(channels=8, seed=3).eval()


@pytest.fixture(scope="module")
def shapes():
    return [s.cloud for s in synth_dataset(DatasetSpec(count=4, extent=(20, 28)), 11)]


@pytest.fixture(scope="module")
def trained(shapes):
    m = S.SurrogateModel(channels=8, seed=4)
    opt = Adam(m.parameters(), lr=3e-3)
    for _ in range(15):
        S.pretrain_step(m, opt, shapes)
    return m.eval()


def test_zero_weights_give_half_probabilities():
    m = zero_model()
    m.head.bias.data[:] = np.arange(8) - 3.5
    rng = np.random.default_rng(0)
    lb = S.network_levels([blob(rng)], m.coarse_levels)
    p = S.predict_child_probs(m, lb.tensor, lb.targets)
    expected = 1 / (1 + np.exp(-(np.arange(8) - 3.5)))
    np.testing.assert_allclose(p, np.broadcast_to(expected, p.shape), rtol=1e-6)


def test_zero_weights_cost_one_bit_per_slot():
    m = zero_model()
    vc = blob(np.random.default_rng(1))
    slots = 8 * sum(len(lvl) for lvl in build_octree(vc).levels)
    assert S.estimate_rate(m, vc) == pytest.approx(slots, rel=1e-9)
    loss = S.pretrain_loss(m.train(), [vc]).item()
    net_slots = slots - S.network_levels([vc], 2).coarse_slots[0]
    assert loss == pytest.approx(net_slots * np.log(2), rel=1e-9)


def test_parent_features_shape_and_order_invariance(small_model):
    rng = np.random.default_rng(2)
    coords = np.unique(rng.integers(0, 16, (60, 3)), axis=0)
    feats = rng.normal(size=(len(coords), S.IN_CHANNELS))
    a = small_model.parent_features(SparseTensor.build(coords, feats))
    perm = rng.permutation(len(coords))
    b = small_model.parent_features(SparseTensor.build(coords[perm], feats[perm]))
    assert a.F.shape == (len(coords), small_model.channels)
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_allclose(a.F, b.F, rtol=1e-6, atol=1e-6)
    one = small_model.parent_features(SparseTensor.build([(1, 2, 3)], np.ones((1, S.IN_CHANNELS))))
    assert one.F.shape == (1, small_model.channels)


def test_causality_within_level(small_model):
    rng = np.random.default_rng(3)
    lb = S.network_levels([blob(rng)], small_model.coarse_levels)
    base = S.predict_child_probs(small_model, lb.tensor, lb.targets)
    for i in range(8):
        altered = lb.targets.copy()
        altered[:, i:] = rng.integers(0, 2, altered[:, i:].shape)
        p = S.predict_child_probs(small_model, lb.tensor, altered)
        np.testing.assert_array_equal(p[:, i], base[:, i])
        if i < 7:  # and later slots do see the change
            assert not np.array_equal(p[:, 7], base[:, 7]) or np.array_equal(altered, lb.targets)


def test_causality_across_levels(small_model):
    rng = np.random.default_rng(4)
    a = blob(rng, depth=6)
    # same nodes down to depth 5, different leaves
    leaves = (a.coords >> 1 << 1) + rng.integers(0, 2, a.coords.shape)
    b = VoxelCloud.from_coords(leaves, 6)
    ta, tb = [], []
    S.lossless_encode(small_model, a, trace=ta)
    S.lossless_encode(small_model, b, trace=tb)
    shallow = [(l, i, q.tolist()) for l, i, q in ta if l < 5]
    assert shallow == [(l, i, q.tolist()) for l, i, q in tb if l < 5]


def test_rate_factorizes_over_passes(small_model):
    vc = blob(np.random.default_rng(5))
    lb = S.network_levels([vc], small_model.coarse_levels)
    per_slot = S.slot_nats(small_model, lb.tensor, lb.targets).data.astype(np.float64)
    total = sum(per_slot[:, i].sum() for i in range(8)) / np.log(2) + lb.coarse_slots[0]
    assert S.estimate_rate(small_model, vc) == pytest.approx(total, rel=1e-9)


def test_batch_losses_are_additive(small_model, shapes):
    batch = S.per_cloud_nats(small_model, shapes)
    single = [S.per_cloud_nats(small_model, [c])[0] for c in shapes]
    np.testing.assert_allclose(batch, single, rtol=1e-5)
    assert S.pretrain_loss(small_model, shapes).item() == pytest.approx(sum(single), rel=1e-5)


def test_two_copies_cost_twice(trained, shapes):
    vc = shapes[0]
    shifted = VoxelCloud.from_coords(np.vstack([vc.coords, vc.coords + 128]), vc.depth)
    one = S.estimate_rate(trained, vc)
    two = S.estimate_rate(trained, shifted)
    assert abs(two / (2 * one) - 1) <= 0.05


def test_pretraining_loss_decreases():
    rng = np.random.default_rng(6)
    vc = blob(rng, depth=6, n=500)
    m = S.SurrogateModel(channels=8, seed=1)
    opt = Adam(m.parameters(), lr=1e-3)
    losses = [S.pretrain_step(m, opt, [vc]) for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_full_cube_overfit():
    g = np.stack(np.meshgrid(*[np.arange(16)] * 3, indexing="ij"), -1).reshape(-1, 3)
    cube = VoxelCloud.from_coords(g, 4)
    m = S.SurrogateModel(channels=8, seed=2)
    opt = Adam(m.parameters(), lr=1e-2)
    for _ in range(150):
        S.pretrain_step(m, opt, [cube])
    m.eval()
    lb = S.network_levels([cube], m.coarse_levels)
    assert S.predict_child_probs(m, lb.tensor, lb.targets).min() > 0.9


def test_estimate_tracks_actual_payload(trained, shapes):
    for vc in shapes:
        est = S.estimate_rate(trained, vc)
        actual = 8 * len(S.lossless_encode(trained, vc).payload)
        assert abs(actual - est) <= 0.03 * est


def test_single_voxel_roundtrip(small_model):
    vc = VoxelCloud.from_coords([(0, 0, 0)], 3)
    bs = S.lossless_encode(small_model, vc)
    assert S.lossless_decode(small_model, Bitstream.from_bytes(bs.to_bytes())) == vc


@settings(max_examples=40, deadline=None)
@given(depth=st.integers(1, 6), n=st.integers(1, 200), seed=st.integers(0, 2**31))
def test_lossless_fuzz(small_model, depth, n, seed):
    vc = random_cloud(np.random.default_rng(seed), n, depth)
    assert S.lossless_decode(small_model, S.lossless_encode(small_model, vc).to_bytes()) == vc


def test_encoder_decoder_probabilities_identical(trained, shapes):
    enc, dec = [], []
    bs = S.lossless_encode(trained, shapes[1], trace=enc)
    assert S.lossless_decode(trained, bs, trace=dec) == shapes[1]
    assert len(enc) == len(dec)
    for (l1, i1, q1), (l2, i2, q2) in zip(enc, dec):
        assert (l1, i1) == (l2, i2) and np.array_equal(q1, q2)


def test_vector_quantization_matches_scalar():
    p = np.r_[np.random.default_rng(7).uniform(0, 1, 1000), 0.5, 0.0, 1.0, 1.5 / 65536, 2.5 / 65536]
    assert S._quantize(p).tolist() == [quantize_probability(x) for x in p]


def test_checkpoint_mismatch_rejected(small_model, tmp_path):
    vc = blob(np.random.default_rng(8))
    bs = S.lossless_encode(small_model, vc)
    other = S.SurrogateModel(channels=8, seed=3).eval()
    other.head.bias.data[0] += 1e-3
    with pytest.raises(CheckpointMismatchError):
        S.lossless_decode(other, bs)
    forged = Bitstream(bs.codec_id, bs.depth, bs.scale, bs.count, bs.payload,
                       checkpoint_hash=bs.checkpoint_hash ^ 1, coarse_levels=bs.coarse_levels)
    with pytest.raises(CheckpointMismatchError):
        S.lossless_decode(small_model, forged.to_bytes())


def test_save_load_preserves_hash(small_model, tmp_path):
    S.save_model(small_model, tmp_path / "s.pvnn")
    loaded = S.load_model(tmp_path / "s.pvnn")
    assert loaded.checkpoint_hash() == small_model.checkpoint_hash()
    vc = blob(np.random.default_rng(9))
    assert S.lossless_decode(loaded, S.lossless_encode(small_model, vc)) == vc


def test_wrong_codec_rejected(small_model):
    with pytest.raises(IntegrityError):
        S.lossless_decode(small_model, Bitstream(0, 3, 1.0, 1, b"\0" * 8))
