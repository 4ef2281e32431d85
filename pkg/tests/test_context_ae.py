import numpy as np
import pytest

from cormp import context_ae as ca
from cormp import demonstrator as dm
from cormp import sim
from cormp.errors import ContractViolation, DimensionError


@pytest.fixture(scope="module")
def model():
    return ca.AeModel(rng=np.random.default_rng(0))


def scene_image(offset, obj=(0.0, -0.2)):
    return dm.quantize(sim.render(sim.SceneState((0, 0, 0), obj, offset)))


def test_architecture(model):
    convs = [l for l in model.encoder.layers if isinstance(l, ca.Conv2dLayer)]
    assert [l.filters for l in convs] == [32, 32, 64, 64, 64]
    assert [l.stride for l in convs] == [2, 1, 2, 1, 2]
    assert model.bottleneck == (64, 8, 8)
    assert model.encoder.layers[-1].n_out == 8


def test_shapes_and_range(model):
    img = scene_image(0.01)
    assert model.encode(img).shape == (8,)
    assert model.encode(np.stack([img, img, img])).shape == (3, 8)
    rec = model.reconstruct(img)
    assert rec.shape == (64, 64)
    assert rec.min() >= 0.0 and rec.max() <= 1.0


def test_encode_deterministic(model):
    img = scene_image(-0.02)
    assert np.array_equal(model.encode(img), model.encode(img.copy()))
    ctx = model.encode_context(img)
    assert ctx.kind == "autoencoder_latent" and ctx.values.shape == (8,)


def test_zero_image_with_zero_bias_gives_zero_latent():
    m = ca.AeModel(rng=np.random.default_rng(1))
    assert not np.any(m.encode(np.zeros((64, 64))))


def test_wrong_size_rejected(model):
    with pytest.raises(DimensionError):
        model.encode(np.zeros((32, 32)))
    with pytest.raises(DimensionError):
        model.reconstruct(np.zeros((2, 64, 65)))


def test_uint8_scaled_and_floats_clamped(model):
    img = scene_image(0.0)
    np.testing.assert_array_equal(model.encode(img), model.encode(img / 255.0))
    np.testing.assert_array_equal(model.encode(np.full((64, 64), 3.0)),
                                  model.encode(np.ones((64, 64))))


def test_split_sizes():
    train, test = ca.split_images(400, np.random.default_rng(0))
    assert (train.size, test.size) == (360, 40)
    assert not set(train) & set(test)
    with pytest.raises(ContractViolation):
        ca.split_images(1, np.random.default_rng(0))


def test_empty_set_rejected():
    with pytest.raises(ContractViolation):
        ca.train_ae(ca.AeModel(rng=np.random.default_rng(0)), np.zeros((0, 64, 64)),
                    np.random.default_rng(0), epochs=1)


def test_output_bias_matches_mean_pixel():
    m = ca.AeModel(rng=np.random.default_rng(2))
    imgs = np.stack([scene_image(0.01)] * 3)
    ca.init_output_bias(m, imgs / 255.0)
    zero = ca.AeModel()  # all-zero weights: output is sigmoid(bias) everywhere
    zero.decoder.layers[-1].bias[:] = m.decoder.layers[-1].bias
    assert zero.reconstruct(imgs[0]).mean() == pytest.approx(imgs.mean() / 255.0)


def test_memorises_a_repeated_image():
    m = ca.AeModel(rng=np.random.default_rng(3))
    imgs = np.stack([scene_image(0.01)] * 4)
    hist = ca.train_ae(m, imgs, np.random.default_rng(4), epochs=70)
    assert len(hist) == 70
    assert hist[-1]["train_mse"] < hist[0]["train_mse"]
    assert hist[-1]["test_mse"] < 1e-3


@pytest.mark.slow
def test_small_corpus_separates_offsets_and_keeps_centroid():
    rng = np.random.default_rng(5)
    offsets = rng.uniform(-0.03, 0.03, 24)
    imgs = np.stack([scene_image(o, (float(rng.uniform(-0.03, 0.03)), -0.2)) for o in offsets]
                    + [scene_image(-0.03), scene_image(0.03)])
    m = ca.AeModel(rng=np.random.default_rng(6))
    hist = ca.train_ae(m, imgs, np.random.default_rng(7), epochs=70, batch_size=4)
    decreases = sum(b["train_mse"] <= a["train_mse"] for a, b in zip(hist, hist[1:]))
    assert decreases >= 0.9 * (len(hist) - 1)
    far = np.linalg.norm(m.encode(scene_image(-0.03)) - m.encode(scene_image(0.03)))
    same = np.linalg.norm(m.encode(scene_image(0.03)) - m.encode(scene_image(0.03).copy()))
    assert far > same
    img = scene_image(0.0, (0.012, -0.2)) / 255.0
    rec = m.reconstruct(img)

    def centroid(a):
        w = np.clip(a - 0.75, 0.0, None)  # object blob only
        r, c = np.indices(a.shape)
        return np.array([(w * r).sum(), (w * c).sum()]) / w.sum()

    assert np.linalg.norm(centroid(rec) - centroid(img)) < 4.0


def test_save_load_round_trip(tmp_path, model):
    model.save(tmp_path / "ae.ckpt", seed=0, metadata={"latent_bounds": [[-1] * 8, [1] * 8]})
    back, header = ca.AeModel.load(tmp_path / "ae.ckpt")
    assert header["metadata"]["latent_bounds"][0] == [-1] * 8
    img = scene_image(0.02)
    assert np.array_equal(model.encode(img), back.encode(img))
