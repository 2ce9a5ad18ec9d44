import numpy as np
import pytest

from invometric import layers as L
from invometric.datasets import BatchPlan, ImageDataset, epoch_indices, normalize
from invometric.exceptions import ConfigError, ShapeError, UnsupportedError, WeightFileError
from invometric.losses import cross_entropy
from invometric.models import (
    PRESETS,
    build_preset,
    count_parameters,
    deserialize,
    evaluate,
    export_kernel_maps,
    history_csv,
    kernel_norm_maps,
    load_weights,
    model_size_kb,
    parameter_table,
    parse_shape,
    payload_bytes,
    preset_layers,
    save_weights,
    serialize,
    to_gray8,
    train,
)
from invometric.optim import Adam
from oracles import naive_conv, naive_involution, scalar_gelu

COUNTS_28 = dict(cnn3a=116320, cnn3b=157824, inn2=560, inn3=584, inn4=608,
                 hybrid1=116344, hybrid2=116368, hybrid3=116392)
COUNTS_32 = dict(cnn3a=116608, cnn3b=158112, inn2=1076, inn3=1102, inn4=1128,
                 hybrid1=116634, hybrid2=116660, hybrid3=116686)


@pytest.mark.parametrize("name", PRESETS)
def test_counts_28(name):
    assert count_parameters(build_preset(name, (28, 28, 1), loss=None)) == COUNTS_28[name]


@pytest.mark.parametrize("name", PRESETS)
def test_counts_32(name):
    assert count_parameters(build_preset(name, (32, 32, 3), loss=None)) == COUNTS_32[name]


def test_involution_layer_counts():
    for c, expected in ((1, 24), (3, 26)):
        layer = L.Involution(L.InvolutionConfig(channels=c), np.random.default_rng(0))
        assert layer.num_parameters() == expected


def test_per_involution_delta():
    for shape, delta in (((28, 28, 1), 24), ((32, 32, 3), 26)):
        counts = [count_parameters(build_preset(n, shape, loss=None)) for n in ("cnn3a", "hybrid1", "hybrid2", "hybrid3")]
        assert np.diff(counts).tolist() == [delta] * 3


def test_head_not_counted():
    a = build_preset("hybrid1", loss="ce")
    b = build_preset("hybrid1", loss="ms")
    assert count_parameters(a) == count_parameters(b) == 116344


def test_size_kb():
    assert f"{model_size_kb(116344):.2f}" == "454.47"
    assert f"{model_size_kb(608):.2f}" == "2.38"


def test_parameter_table_rows():
    rows = parameter_table()
    assert len(rows) == 16
    assert {(r.preset, r.input_shape[-1]): r.params for r in rows}[("inn3", 1)] == 584


def test_preset_layers():
    kinds = [ls.kind for ls in preset_layers("hybrid2")]
    assert kinds == ["involution", "gelu"] * 2 + ["conv", "gelu"] * 3 + ["gap", "dense"]
    assert [ls.size for ls in preset_layers("cnn3b") if ls.kind == "conv"] == [16, 96, 128]
    assert [ls.kind for ls in preset_layers("inn3")].count("conv") == 0
    with pytest.raises(ConfigError):
        preset_layers("resnet")


def test_parse_shape():
    assert parse_shape("32x32x3") == (32, 32, 3)
    for bad in ("28x28", "axbxc", "0x28x1"):
        with pytest.raises(ConfigError):
            parse_shape(bad)


def test_determinism():
    a, b = build_preset("hybrid1", seed=5), build_preset("hybrid1", seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.state_arrays(), b.state_arrays()))
    c = build_preset("hybrid1", seed=6)
    assert not all(np.array_equal(x, y) for x, y in zip(a.state_arrays(), c.state_arrays()))


def layerwise_oracle(model, image):
    """Compose naive per-layer oracles in float64 for one image."""
    x = image.astype(np.float64)
    for layer in model.trunk:
        p = {k: v.astype(np.float64) for k, v in layer.params.items()}
        if isinstance(layer, L.Involution):
            h, w, _ = x.shape
            mean = float(layer.buffers["bn_running_mean"][0])
            var = float(layer.buffers["bn_running_var"][0])
            kern = np.zeros((h, w, 3, 3, 1))
            for i in range(h):
                for j in range(w):
                    r = float(x[i, j] @ p["reduce_weights"][:, 0] + p["reduce_bias"][0])
                    r = (r - mean) / np.sqrt(var + 1e-3) * p["bn_gamma"][0] + p["bn_beta"][0]
                    r = scalar_gelu(r)
                    kern[i, j] = (r * p["span_weights"][0] + p["span_bias"]).reshape(3, 3, 1)
            x = naive_involution(x, kern, 1)
        elif isinstance(layer, L.Conv2D):
            x = naive_conv(x, p["weights"], p["bias"])
        elif isinstance(layer, L.GELU):
            x = np.vectorize(scalar_gelu)(x)
        elif isinstance(layer, L.GlobalAveragePool):
            x = x.mean(axis=(0, 1))
        elif isinstance(layer, L.Dense):
            x = x @ p["weights"] + p["bias"]
    return x


def test_forward_matches_layerwise_oracle():
    model = build_preset("hybrid1", (6, 6, 1), seed=2, loss=None)
    # give the running statistics a non-trivial value
    inv = model.trunk[0]
    inv.buffers["bn_running_mean"][:] = 0.2
    inv.buffers["bn_running_var"][:] = 0.5
    image = np.random.default_rng(0).random((6, 6, 1))
    got = model.forward(image[None].astype(np.float32))[0]
    np.testing.assert_allclose(got, layerwise_oracle(model, image), rtol=1e-4, atol=1e-5)


def test_forward_batch_independent_in_infer_mode():
    model = build_preset("hybrid1", (8, 8, 1), seed=0)
    x = np.random.default_rng(0).random((4, 8, 8, 1)).astype(np.float32)
    full = model.forward(x)
    np.testing.assert_allclose(model.forward(x[2:3]), full[2:3], rtol=1e-5, atol=1e-6)


def test_infer_mode_is_pure():
    model = build_preset("inn2", (8, 8, 1), seed=0)
    before = [a.copy() for a in model.state_arrays()]
    model.forward(np.random.default_rng(0).random((3, 8, 8, 1)))
    assert all(np.array_equal(a, b) for a, b in zip(before, model.state_arrays()))


def test_input_shape_checked():
    model = build_preset("hybrid1")
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 32, 32, 3)))


def test_embed_normalizes_uint8():
    model = build_preset("inn2", (8, 8, 1), loss="ms")
    raw = np.random.default_rng(0).integers(0, 256, size=(5, 8, 8, 1), dtype=np.uint8)
    emb = model.embed(raw, batch_size=2)
    np.testing.assert_allclose(emb, model.forward_embedding(normalize(raw)), rtol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)


# ------------------------------------------------------------ weight file


def test_payload_and_file_size():
    model = build_preset("hybrid1")
    assert payload_bytes(model) == 465376
    assert f"{payload_bytes(model) / 1024:.2f}" == "454.47"
    assert len(serialize(model)) < 1_000_000


@pytest.mark.parametrize("loss", ["ce", "ms", None])
def test_round_trip_bitwise(tmp_path, loss):
    model = build_preset("hybrid2", seed=9, loss=loss)
    for a in model.state_arrays():
        a += np.random.default_rng(a.size).normal(size=a.shape).astype(a.dtype)
    save_weights(model, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin")
    assert back.spec == model.spec and back.seed == 9
    assert all(np.array_equal(a, b) for a, b in zip(model.state_arrays(), back.state_arrays()))
    assert serialize(back) == serialize(model)


def test_truncated_weight_file_rejected(tmp_path):
    raw = serialize(build_preset("inn2"))
    for cut in (4, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(WeightFileError):
            deserialize(raw[:cut])
    with pytest.raises(WeightFileError):
        deserialize(raw + b"\0")
    with pytest.raises(WeightFileError):
        deserialize(b"NOTMAGIC" + raw[8:])


def test_load_weights_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_weights(tmp_path / "none.bin")


# --------------------------------------------------------------- training


def toy_dataset(n=64, size=6, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 4
    images = np.zeros((n, size, size, 1), np.uint8)
    for i, lab in enumerate(labels):
        images[i, lab, :, 0] = 200
    images = np.clip(images + rng.integers(0, 40, size=images.shape), 0, 255).astype(np.uint8)
    return ImageDataset(images, labels)


def test_zero_epochs_leaves_model_unchanged():
    model = build_preset("hybrid1", (6, 6, 1))
    before = serialize(model)
    assert train(model, toy_dataset(), 0) == []
    assert serialize(model) == before
    assert history_csv([]) == "epoch,train_loss,test_loss,seconds\n"


def test_train_replay_oracle():
    """The trainer equals a hand-written forward/backward/Adam loop."""
    ds = toy_dataset()
    plan = BatchPlan("shuffled", 16, seed=1)
    model = build_preset("hybrid1", (6, 6, 1), seed=3)
    history = train(model, ds, 2, plan)

    ref = build_preset("hybrid1", (6, 6, 1), seed=3)
    opt = Adam()
    losses = []
    for epoch in range(2):
        epoch_losses = []
        for idx in epoch_indices(ds.labels, plan, epoch):
            out = ref.forward(normalize(ds.images[idx]), train=True)
            loss, grad = cross_entropy(out, ds.labels[idx])
            ref.backward(grad)
            opt.step(ref.parameters(), ref.gradients())
            epoch_losses.append(loss)
        losses.append(np.mean(epoch_losses))
    assert [r.train_loss for r in history] == pytest.approx(losses, rel=0, abs=0)
    assert serialize(model) == serialize(ref)


def test_training_is_deterministic():
    ds = toy_dataset()
    runs = []
    for _ in range(2):
        model = build_preset("inn2", (6, 6, 1), seed=1, loss="ms")
        h = train(model, ds, 1, BatchPlan("balanced", 16, 0, 4, 4))
        runs.append(([r.train_loss for r in h], serialize(model)))
    assert runs[0] == runs[1]


def test_one_adam_step_changes_parameters():
    ds = toy_dataset(16)
    model = build_preset("hybrid1", (6, 6, 1))
    before = [p.copy() for p in model.parameters()]
    train(model, ds, 1, BatchPlan("shuffled", 16, 0))
    assert any(not np.array_equal(a, b) for a, b in zip(before, model.parameters()))


def test_toy_training_reduces_loss():
    ds = toy_dataset(128)
    model = build_preset("hybrid1", (6, 6, 1), seed=0)
    start = evaluate(model, ds)
    train(model, ds, 4, BatchPlan("shuffled", 16, 0))
    assert evaluate(model, ds) < start


def test_train_validation():
    ds = toy_dataset()
    with pytest.raises(UnsupportedError):
        train(build_preset("inn2", (6, 6, 1), loss=None), ds, 1)
    with pytest.raises(ShapeError):
        train(build_preset("inn2", (8, 8, 1)), ds, 1)
    with pytest.raises(ConfigError):
        train(build_preset("inn2", (6, 6, 1), loss="ms"), ds, 1, BatchPlan("shuffled", 16, 0))
    with pytest.raises(ConfigError):
        train(build_preset("inn2", (6, 6, 1)), ds, -1)


def test_running_stats_follow_the_data():
    """One bias-corrected update stores exactly the batch statistics."""
    ds = toy_dataset(16)
    model = build_preset("inn2", (6, 6, 1))
    inv = model.trunk[0]
    w0, b0 = inv.params["reduce_weights"].copy(), inv.params["reduce_bias"].copy()
    train(model, ds, 1, BatchPlan("shuffled", 16, 0))
    r = (normalize(ds.images).reshape(-1, 1).astype(np.float64) @ w0 + b0)[:, 0]
    assert inv.buffers["bn_running_mean"][0] == pytest.approx(r.mean(), rel=1e-5)
    assert inv.buffers["bn_running_var"][0] == pytest.approx(r.var(), rel=1e-4)


# ----------------------------------------------------------- kernel maps


def test_kernel_map_shapes():
    model = build_preset("hybrid2", (10, 10, 1))
    maps = kernel_norm_maps(model, np.random.default_rng(0).random((3, 10, 10, 1)))
    assert len(maps) == 2 and all(m.shape == (3, 10, 10) for m in maps)


def test_kernel_map_constant_input():
    model = build_preset("inn2", (8, 8, 1))
    maps = kernel_norm_maps(model, np.full((1, 8, 8, 1), 0.4))
    # the first layer sees a constant image, so every pixel gets the same kernel
    assert np.ptp(maps[0]) < 1e-6
    assert not to_gray8(maps[0][0]).any()


def test_kernel_map_locality():
    """Kernel generation is 1x1, so one changed pixel changes one map entry."""
    model = build_preset("hybrid1", (8, 8, 1))
    x = np.random.default_rng(0).random((1, 8, 8, 1))
    y = x.copy()
    y[0, 3, 5, 0] += 0.5
    diff = np.abs(kernel_norm_maps(model, x)[0] - kernel_norm_maps(model, y)[0])[0]
    assert diff[3, 5] > 0
    diff[3, 5] = 0
    assert diff.max() == 0


def test_kernel_maps_need_involution():
    with pytest.raises(UnsupportedError):
        kernel_norm_maps(build_preset("cnn3a"), np.zeros((1, 28, 28, 1)))


def test_export_kernel_maps(tmp_path):
    from PIL import Image

    model = build_preset("hybrid2", (8, 8, 1))
    images = np.random.default_rng(0).integers(0, 256, size=(2, 8, 8, 1), dtype=np.uint8)
    paths = export_kernel_maps(model, images, tmp_path, names=[10, 11])
    assert sorted(p.name for p in paths) == sorted(
        f"involution{l}_image{n}.pgm" for l in (1, 2) for n in (10, 11))
    img = np.asarray(Image.open(tmp_path / "involution1_image10.pgm"))
    assert img.shape == (8, 8) and img.dtype == np.uint8
    np.testing.assert_array_equal(img, to_gray8(kernel_norm_maps(model, images)[0][0]))
    assert (tmp_path / "involution1_image10.pgm").read_bytes()[:2] == b"P5"
