import numpy as np
import pytest

from crlstereo import tensor as T
from crlstereo.networks import (
    CheckpointError,
    CRLConfig,
    CRLModel,
    assemble_stage2_input,
    build_dispfulnet,
    build_dispresnet,
    dispfulnet_spec,
    dispresnet_spec,
    forward_crl,
    forward_stage2,
    load_checkpoint,
    predict,
    save_checkpoint,
    zero_residuals,
)
from crlstereo.stereo_ops import DisparityMap, downsample_disparity
from crlstereo.tensor import DimensionError, Tensor

# (layer, K, S, in, out, I, O, inputs) transcribed from the DispResNet layer table.
# conv3's source is taken as conv2_1.
TABLE = [
    ("conv1", 5, 1, 13, 64, 1, 1, ("left", "right", "left_s", "err", "pr_s1")),
    ("conv2", 5, 2, 64, 128, 1, 2, ("conv1",)),
    ("conv2_1", 3, 1, 128, 128, 2, 2, ("conv2",)),
    ("conv3", 3, 2, 128, 256, 2, 4, ("conv2_1",)),
    ("conv3_1", 3, 1, 256, 256, 4, 4, ("conv3",)),
    ("conv4", 3, 2, 256, 512, 4, 8, ("conv3_1",)),
    ("conv4_1", 3, 1, 512, 512, 8, 8, ("conv4",)),
    ("conv5", 3, 2, 512, 1024, 8, 16, ("conv4_1",)),
    ("conv5_1", 3, 1, 1024, 1024, 16, 16, ("conv5",)),
    ("res_16", 3, 1, 1024, 1, 16, 16, ("conv5_1",)),
    ("pr_s1_16", None, None, 1, 1, 1, 16, ("pr_s1",)),
    ("pr_s2_16", None, None, 1, 1, 16, 16, ("pr_s1_16", "res_16")),
    ("upconv4", 4, 2, 1024, 512, 16, 8, ("conv5_1",)),
    ("iconv4", 3, 1, 1025, 512, 8, 8, ("upconv4", "conv4_1", "pr_s2_16")),
    ("res_8", 3, 1, 512, 1, 8, 8, ("iconv4",)),
    ("pr_s1_8", None, None, 1, 1, 1, 8, ("pr_s1",)),
    ("pr_s2_8", None, None, 1, 1, 8, 8, ("pr_s1_8", "res_8")),
    ("upconv3", 4, 2, 512, 256, 8, 4, ("iconv4",)),
    ("iconv3", 3, 1, 513, 256, 4, 4, ("upconv3", "conv3_1", "pr_s2_8")),
    ("res_4", 3, 1, 256, 1, 4, 4, ("iconv3",)),
    ("pr_s1_4", None, None, 1, 1, 1, 4, ("pr_s1",)),
    ("pr_s2_4", None, None, 1, 1, 4, 4, ("pr_s1_4", "res_4")),
    ("upconv2", 4, 2, 256, 128, 4, 2, ("iconv3",)),
    ("iconv2", 3, 1, 257, 128, 2, 2, ("upconv2", "conv2_1", "pr_s2_4")),
    ("res_2", 3, 1, 128, 1, 2, 2, ("iconv2",)),
    ("pr_s1_2", None, None, 1, 1, 1, 2, ("pr_s1",)),
    ("pr_s2_2", None, None, 1, 1, 2, 2, ("pr_s1_2", "res_2")),
    ("upconv1", 4, 2, 128, 64, 2, 1, ("iconv2",)),
    ("res_1", 5, 1, 129, 1, 1, 1, ("upconv1", "conv1", "pr_s2_2")),
    ("pr_s2", None, None, 1, 1, 1, 1, ("pr_s1", "res_1")),
]


def test_dispresnet_table_cells():
    spec = dispresnet_spec(1.0)
    got = [(l.name, l.kernel, l.stride, l.in_channels, l.out_channels, l.in_factor, l.out_factor, l.inputs)
           for l in spec.layers]
    assert sorted(got) == sorted(TABLE)


def test_dispresnet_width_scales_internal_channels_only():
    spec = dispresnet_spec(0.25)
    assert spec.layer("conv1").in_channels == 13
    assert spec.layer("conv1").out_channels == 16
    assert spec.layer("res_1").in_channels == 16 + 16 + 1
    assert spec.layer("res_16").out_channels == 1


def test_dispresnet_forward_shapes():
    net = build_dispresnet(0.125, seed=0, dtype=np.float64)
    x = Tensor(np.random.default_rng(0).random((1, 13, 64, 128)))
    preds = forward_stage2(net, x, x.data[:, 12:13])
    assert sorted(preds) == [0, 1, 2, 3, 4]
    for s, d in preds.items():
        assert d.shape == (1, 1, 64 >> s, 128 >> s)


def test_dispfulnet_forward_shapes_and_sharing():
    net = build_dispfulnet(0.125, max_disp=4, seed=0)
    spec = dispfulnet_spec(0.125, 4)
    assert "conv1_r.weight" not in net.params
    assert spec.layer("conv1_r").shared_with == "conv1"
    left = Tensor(np.random.default_rng(1).random((1, 3, 64, 128)).astype(np.float32))
    outs = net.forward({"left": left, "right": left})
    assert outs["corr"].shape == (1, 5, 16, 32)
    for s in range(7):
        assert outs[f"pr{s}"].shape == (1, 1, 64 >> s, 128 >> s)


def test_input_size_must_be_divisible():
    net = build_dispresnet(0.125)
    with pytest.raises(DimensionError):
        forward_stage2(net, Tensor(np.zeros((1, 13, 60, 128), np.float32)), np.zeros((1, 1, 60, 128), np.float32))


def test_stage2_input_channels_checked():
    with pytest.raises(DimensionError):
        forward_stage2(build_dispresnet(0.125), Tensor(np.zeros((1, 12, 64, 64), np.float32)),
                       np.zeros((1, 1, 64, 64), np.float32))


def _model():
    return CRLModel.build(CRLConfig(width1=0.125, width2=0.125, max_disp=4), seed=3)


def test_zero_residual_identity_exact():
    model = _model()
    rng = np.random.default_rng(2)
    left = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))
    right = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))
    with T.no_grad():
        d1, d2 = forward_crl(model, left, right, zero_residual=True)
    base = d1[0]
    for s in range(5):
        expect = downsample_disparity(base, 2 ** s).numpy() if s else base.numpy()
        assert np.array_equal(d2[s].numpy(), expect)


def test_zero_residuals_helper_zeroes_weights():
    model = _model()
    zero_residuals(model.stage2)
    rng = np.random.default_rng(4)
    left = Tensor(rng.random((1, 3, 64, 64)).astype(np.float32))
    with T.no_grad():
        d1, d2 = forward_crl(model, left, left)
    assert np.array_equal(d2[0].numpy(), d1[0].numpy())


def test_gradient_reaches_d1_through_stage2():
    net = build_dispresnet(0.125, seed=0, dtype=np.float64)
    rng = np.random.default_rng(5)
    left = Tensor(rng.random((1, 3, 32, 32)))
    right = Tensor(rng.random((1, 3, 32, 32)))
    d1 = Tensor(rng.uniform(1.1, 3.4, (1, 1, 32, 32)), requires_grad=True)
    x13 = assemble_stage2_input(left, right, d1, -1)
    preds = forward_stage2(net, x13, d1)
    T.backward(T.mean(preds[0].data), leaves=[d1])
    assert np.abs(d1.grad).sum() > 0


def test_predict_handles_arbitrary_sizes():
    model = _model()
    img = np.random.default_rng(6).random((3, 50, 70)).astype(np.float32)
    disp, res = predict(model, img, img, stage=2)
    assert disp.shape == (50, 70) and res.shape == (50, 70)
    disp1, none = predict(model, img, img, stage=1)
    assert none is None and disp1.shape == (50, 70)


def test_checkpoint_roundtrip(tmp_path):
    model = _model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, {"phase": "1F"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"phase": "1F"}
    assert loaded.stage1.checksum() == model.stage1.checksum()
    assert loaded.stage2.checksum() == model.stage2.checksum()
    assert loaded.config == model.config


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, _model())
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_build_is_seeded():
    a, b = _model(), _model()
    assert a.stage1.checksum() == b.stage1.checksum()
    c = CRLModel.build(CRLConfig(width1=0.125, width2=0.125, max_disp=4), seed=4)
    assert c.stage1.checksum() != a.stage1.checksum()


def test_disparity_map_validates_shape():
    with pytest.raises(DimensionError):
        DisparityMap(Tensor(np.zeros((1, 2, 4, 4))))


def test_final_prediction_minus_d1_is_res_1():
    model = CRLModel.build(CRLConfig(width1=0.125, width2=0.125, max_disp=4), seed=3, dtype=np.float64)
    rng = np.random.default_rng(7)
    left = Tensor(rng.random((2, 3, 64, 64)))
    right = Tensor(rng.random((2, 3, 64, 64)))
    with T.no_grad():
        d1, d2 = forward_crl(model, left, right)
    diff = d2[0].numpy() - d1[0].numpy()
    assert np.abs(diff - d2.residuals[0].data).max() < 1e-12
    assert d1[0].shape == (2, 1, 64, 64)


def test_forward_is_deterministic():
    model = _model()
    img = Tensor(np.random.default_rng(8).random((1, 3, 64, 64)).astype(np.float32))
    with T.no_grad():
        a = forward_crl(model, img, img)[1][0].numpy()
        b = forward_crl(model, img, img)[1][0].numpy()
    assert np.array_equal(a, b)


def test_halving_width_halves_channels():
    full, half = dispfulnet_spec(0.5, 6), dispfulnet_spec(0.25, 6)
    for a, b in zip(full.layers, half.layers):
        if a.kind in ("conv", "upconv"):
            assert b.out_channels == -(-a.out_channels // 2)
        if a.kind == "prediction":
            assert a.out_channels == b.out_channels == 1


def test_end_to_end_gradient_reaches_stage1():
    model = CRLModel.build(CRLConfig(width1=0.125, width2=0.125, max_disp=4), seed=0, dtype=np.float64)
    rng = np.random.default_rng(9)
    left, right = Tensor(rng.random((1, 3, 64, 64))), Tensor(rng.random((1, 3, 64, 64)))
    _, d2 = forward_crl(model, left, right)
    T.backward(T.mean(d2[0].data), leaves=model.parameters())
    assert np.abs(model.stage1.params["conv1.weight"].grad).sum() > 0
