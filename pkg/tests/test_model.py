"""Model assembly, EDC fusion equivalence, and weight serialization."""

import numpy as np
import pytest

from helpers import finite_diff_grad, make_test_image, max_rel_err

from cfsr.errors import ConfigError, DataError, ModeError, ShapeError
from cfsr.layers import Conv2dWeights, DwConvWeights, conv1x1, dwconv, gelu, softmax3
from cfsr.model import (
    LAPLACE4,
    LAPLACE8,
    SOBEL_X,
    SOBEL_Y,
    CfsrModel,
    ConvFormerLayer,
    EdgeDwConv,
    LargeKernelMixer,
    ModelConfig,
    edc_branched,
    fuse_store,
    merge_edc_branches,
)
from cfsr.tensor import GradTape, Tensor, add, backward, compute_dtype, mul_elementwise, sum_all
from cfsr.train import l1_loss

TINY = dict(channels=4, n_brb=1, n_cfl_per_brb=1, mixer_kernel=5, scale=2)


def rand(shape, seed, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


def randomize_edc(w: EdgeDwConv, rng):
    w.kernel.data = rng.uniform(-1, 1, w.kernel.shape).astype(w.kernel.data.dtype)
    for b in (w.bias, w.bias_sobel_x, w.bias_sobel_y, w.bias_lap4, w.bias_lap8):
        b.data = rng.uniform(-0.5, 0.5, b.shape).astype(b.data.dtype)
    w.logits.data = rng.normal(0.0, 2.0, (1, 3, 1, 1)).astype(w.logits.data.dtype)


# ---------------------------------------------------------------------------
# large-kernel mixer

def test_mixer_all_zero_weights_gives_zero():
    mixer = LargeKernelMixer(3, 5, np.random.default_rng(0))
    for w in (mixer.value, mixer.gate_in, mixer.out):
        w.kernel.data[:] = 0.0
    mixer.gate_dw.kernel.data[:] = 0.0
    out = mixer(Tensor(rand((1, 3, 4, 4), 1)))
    assert np.array_equal(out.data, np.zeros_like(out.data))


def test_mixer_identity_weights_square_the_input():
    c = 3
    mixer = LargeKernelMixer(c, 3, np.random.default_rng(2))
    eye = np.eye(c).reshape(c, c, 1, 1)
    for w in (mixer.value, mixer.gate_in, mixer.out):
        w.kernel.data = eye.astype(w.kernel.data.dtype)
        w.bias.data[:] = 0.0
    center = np.zeros((c, 1, 3, 3))
    center[:, 0, 1, 1] = 1.0
    mixer.gate_dw.kernel.data = center.astype(np.float32)
    mixer.gate_dw.bias.data[:] = 0.0
    x = Tensor(rand((1, c, 4, 4), 3))
    assert np.allclose(mixer(x).data, x.data * x.data, atol=1e-6)


def test_mixer_matches_straight_line_composition():
    mixer = LargeKernelMixer(4, 5, np.random.default_rng(4))
    x = Tensor(rand((1, 4, 6, 6), 5))
    got = mixer(x).data
    v = conv1x1(x, mixer.value)
    gate = dwconv(conv1x1(x, mixer.gate_in), mixer.gate_dw)
    want = conv1x1(mul_elementwise(v, gate), mixer.out).data
    assert np.allclose(got, want, atol=1e-6)


# ---------------------------------------------------------------------------
# EDC: branched forward, fusion math, equivalence

def test_edc_constant_input_zero_learnables_vanishes_inside():
    w = EdgeDwConv(2, np.random.default_rng(6))
    w.kernel.data[:] = 0.0
    out = edc_branched(Tensor(np.ones((1, 2, 5, 5))), w).data
    assert np.allclose(out[:, :, 1:-1, 1:-1], 0.0, atol=1e-7)


def test_edc_logit_dominance_selects_first_branch():
    rng = np.random.default_rng(7)
    w = EdgeDwConv(3, rng)
    randomize_edc(w, rng)
    w.logits.data = np.array([50.0, 0.0, 0.0]).reshape(1, 3, 1, 1).astype(np.float32)
    x = Tensor(rand((1, 3, 6, 6), 8))
    got = edc_branched(x, w).data
    want = dwconv(x, DwConvWeights(w.kernel, w.bias)).data
    assert np.allclose(got, want, atol=1e-5)


def test_edc_matches_three_branch_composition():
    rng = np.random.default_rng(9)
    w = EdgeDwConv(4, rng)
    randomize_edc(w, rng)
    x = Tensor(rand((2, 4, 6, 6), 10, -3, 3))
    got = edc_branched(x, w).data

    a = softmax3(w.logits.data)
    f33 = dwconv(x, DwConvWeights(w.kernel, w.bias)).data
    f_sob = (
        dwconv(x, DwConvWeights(Tensor(w.sobel_x), w.bias_sobel_x)).data
        + dwconv(x, DwConvWeights(Tensor(w.sobel_y), w.bias_sobel_y)).data
    )
    f_lap = (
        dwconv(x, DwConvWeights(Tensor(w.lap4), w.bias_lap4)).data
        + dwconv(x, DwConvWeights(Tensor(w.lap8), w.bias_lap8)).data
    )
    want = a[0] * f33 + a[1] * f_sob + a[2] * f_lap
    assert np.allclose(got, want, atol=1e-5)


def test_edc_fuse_equal_weights_averages_kernels():
    w = EdgeDwConv(2, np.random.default_rng(11))
    w.kernel.data = rand((2, 1, 3, 3), 12).astype(np.float32)
    kernel, bias = w.fused_weights()
    want = (w.kernel.data + w.sobel_x + w.sobel_y + w.lap4 + w.lap8) / 3.0
    assert np.allclose(kernel, want, atol=1e-6)
    assert np.allclose(bias, 0.0)


def test_edc_fuse_dominant_sobel_branch():
    w = EdgeDwConv(2, np.random.default_rng(13))
    w.kernel.data[:] = 0.0
    w.logits.data = np.array([0.0, 60.0, 0.0]).reshape(1, 3, 1, 1).astype(np.float32)
    kernel, _ = w.fused_weights()
    assert np.allclose(kernel, w.sobel_x + w.sobel_y, atol=1e-5)


def test_fusion_equivalence_over_100_random_draws():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(1, 9))
        w = EdgeDwConv(c, rng)
        randomize_edc(w, rng)
        x = Tensor(rng.uniform(-3, 3, (2, c, 8, 8)))
        branched = edc_branched(x, w).data.astype(np.float64)
        kernel, bias = w.fused_weights()
        fused = dwconv(x, DwConvWeights(Tensor(kernel), Tensor(bias))).data.astype(np.float64)
        worst = max(worst, float(np.max(np.abs(branched - fused))))
    assert worst <= 1e-5


def test_edc_gradients_match_fd():
    with compute_dtype(np.float64):
        rng = np.random.default_rng(14)
        w = EdgeDwConv(3, rng)
        randomize_edc(w, rng)
        x = Tensor(rand((1, 3, 4, 4), 15), requires_grad=True)
        scale = Tensor(rand((1, 3, 4, 4), 16))

        def build_loss():
            return sum_all(mul_elementwise(edc_branched(x, w), scale))

        with GradTape() as tape:
            backward(build_loss(), tape)
        for name, p in [("x", x)] + list(w.named_params("edc")):
            fd = finite_diff_grad(p.data, lambda: build_loss().item())
            assert max_rel_err(p.grad, fd) <= 1e-3, name


# ---------------------------------------------------------------------------
# FFN and full layers

def test_ffn_zero_input_zero_bias_gives_zero():
    layer = ConvFormerLayer(ModelConfig(**TINY), np.random.default_rng(17))
    out = layer.ffn(Tensor(np.zeros((1, 4, 5, 5))))
    assert np.allclose(out.data, 0.0, atol=1e-7)


def test_ffn_fused_equals_branched():
    rng = np.random.default_rng(18)
    layer = ConvFormerLayer(ModelConfig(**TINY), rng)
    randomize_edc(layer.ffn.edc, rng)
    x = Tensor(rand((1, 4, 6, 6), 19))
    branched = layer.ffn(x).data.copy()
    layer.ffn.fuse()
    fused = layer.ffn(x).data
    assert np.allclose(branched, fused, atol=1e-5)


def test_ffn_matches_straight_line_composition():
    rng = np.random.default_rng(20)
    layer = ConvFormerLayer(ModelConfig(**TINY), rng)
    ffn = layer.ffn
    x = Tensor(rand((1, 4, 5, 5), 21))
    got = ffn(x).data
    want = conv1x1(edc_branched(gelu(conv1x1(x, ffn.expand)), ffn.edc), ffn.project).data
    assert np.allclose(got, want, atol=1e-6)


def test_fused_ffn_refuses_gradient_recording():
    layer = ConvFormerLayer(ModelConfig(**TINY), np.random.default_rng(22))
    layer.ffn.fuse()
    with pytest.raises(ModeError):
        with GradTape():
            layer.ffn(Tensor(rand((1, 4, 5, 5), 23), requires_grad=True))


# ---------------------------------------------------------------------------
# full model

def test_model_output_shape_contract():
    model = CfsrModel(ModelConfig(**{**TINY, "scale": 4}), np.random.default_rng(24))
    out = model(Tensor(rand((1, 3, 17, 13), 25, 0, 1)))
    assert out.shape == (1, 3, 68, 52)


@pytest.mark.parametrize("h,w,n", [(1, 1, 1), (2, 5, 2), (8, 3, 1)])
def test_model_output_shape_for_degenerate_inputs(h, w, n):
    model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(45))
    out = model(Tensor(rand((n, 3, h, w), 46, 0, 1)))
    assert out.shape == (n, 3, 2 * h, 2 * w)


def test_model_zero_weights_gives_zero_output():
    model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(26))
    for _, p in model.named_params():
        p.data[:] = 0.0
    out = model(Tensor(rand((1, 3, 6, 6), 27, 0, 1)))
    assert np.array_equal(out.data, np.zeros_like(out.data))


def test_model_rejects_non_rgb_input():
    model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(28))
    with pytest.raises(ShapeError):
        model(Tensor(rand((1, 4, 6, 6), 29)))


def test_default_x4_parameter_count_within_5_percent_of_307k():
    model = CfsrModel(ModelConfig(scale=4), np.random.default_rng(0), mode="fused")
    assert abs(model.num_params() - 307_000) <= 0.05 * 307_000


def test_full_tiny_model_gradients_match_fd():
    # every learnable parameter of the tiny config against central differences
    with compute_dtype(np.float64):
        model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(30))
        x = Tensor(rand((1, 3, 8, 8), 31, 0, 1))
        base = model(x).data
        # offsets keep |pred - target| > 0.5 so the L1 kink is never crossed
        offsets = np.sign(rand(base.shape, 32)) * rand(base.shape, 33, 0.5, 1.5)
        target = Tensor(base - offsets)

        def build_loss():
            return l1_loss(model(x), target)

        with GradTape() as tape:
            backward(build_loss(), tape)
        for name, p in model.learnable_params():
            fd = finite_diff_grad(p.data, lambda: build_loss().item())
            assert max_rel_err(p.grad, fd) <= 1e-3, name


def test_fixed_kernels_match_printed_matrices_and_are_frozen():
    assert np.array_equal(SOBEL_X, [[1, 0, -1], [2, 0, -2], [1, 0, -1]])
    assert np.array_equal(SOBEL_Y, [[1, 2, 1], [0, 0, 0], [-1, -2, -1]])
    assert np.array_equal(LAPLACE4, [[0, 1, 0], [1, -4, 1], [0, 1, 0]])
    assert np.array_equal(LAPLACE8, [[1, 1, 1], [1, -8, 1], [1, 1, 1]])
    w = EdgeDwConv(3, np.random.default_rng(34))
    for fixed, printed in [
        (w.sobel_x, SOBEL_X), (w.sobel_y, SOBEL_Y), (w.lap4, LAPLACE4), (w.lap8, LAPLACE8),
    ]:
        # byte-identical across channels, and not writable
        for ch in range(3):
            assert fixed[ch, 0].tobytes() == printed.astype(np.float32).tobytes()
        assert not fixed.flags.writeable
    names = [n for n, _ in w.named_params("edc")]
    assert not any("sobel_x.kernel" in n or "lap" in n and "kernel" in n for n in names)


# ---------------------------------------------------------------------------
# weight store round trips

def test_save_load_roundtrip_is_bit_exact(tmp_path):
    model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(35))
    path = tmp_path / "a.cfsrwt"
    model.state().save(path)
    first = path.read_bytes()
    reloaded = CfsrModel(ModelConfig(**TINY), np.random.default_rng(99))
    from cfsr.weights import WeightStore
    reloaded.load_state(WeightStore.load(path))
    for (na, pa), (nb, pb) in zip(model.named_params(), reloaded.named_params()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    path2 = tmp_path / "b.cfsrwt"
    reloaded.state().save(path2)
    assert first == path2.read_bytes()


def test_loading_wrong_scale_names_offending_tensor(tmp_path):
    from cfsr.weights import WeightStore
    m2 = CfsrModel(ModelConfig(**TINY), np.random.default_rng(36))
    path = tmp_path / "x2.cfsrwt"
    m2.state().save(path)
    m4 = CfsrModel(ModelConfig(**{**TINY, "scale": 4}), np.random.default_rng(37))
    with pytest.raises(ShapeError) as err:
        m4.load_state(WeightStore.load(path))
    assert "recon" in str(err.value)


def test_fused_store_is_strictly_smaller(tmp_path):
    model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(38))
    branched = model.state()
    fused = fuse_store(branched)
    assert len(fused) < len(branched)
    assert fused.num_scalars() < branched.num_scalars()
    p1, p2 = tmp_path / "b.cfsrwt", tmp_path / "f.cfsrwt"
    branched.save(p1)
    fused.save(p2)
    assert p2.stat().st_size < p1.stat().st_size


def test_fused_store_loads_only_into_fused_model(tmp_path):
    from cfsr.weights import WeightStore
    model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(39))
    fused = fuse_store(model.state())
    path = tmp_path / "f.cfsrwt"
    fused.save(path)
    with pytest.raises(ModeError):
        model.load_state(WeightStore.load(path))
    target = CfsrModel(ModelConfig(**TINY), mode="fused")
    target.load_state(WeightStore.load(path))
    x = Tensor(rand((1, 3, 6, 6), 40, 0, 1))
    model.fuse()
    assert np.allclose(model(x).data, target(x).data, atol=1e-7)


def test_store_level_fusion_matches_model_level(tmp_path):
    rng = np.random.default_rng(41)
    model = CfsrModel(ModelConfig(**TINY), rng)
    for block in model.blocks:
        for layer in block.layers:
            randomize_edc(layer.ffn.edc, rng)
    store_fused = fuse_store(model.state())
    model.fuse()
    direct = model.state()
    assert store_fused.names() == direct.names()
    for name, arr in store_fused.items():
        assert np.array_equal(arr, direct.get(name)), name


def test_corrupt_weight_files_are_rejected(tmp_path):
    from cfsr.weights import WeightStore
    model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(42))
    path = tmp_path / "w.cfsrwt"
    model.state().save(path)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.cfsrwt"
    bad_magic.write_bytes(b"NOTCFSR0" + blob[8:])
    with pytest.raises(DataError):
        WeightStore.load(bad_magic)

    truncated = tmp_path / "trunc.cfsrwt"
    truncated.write_bytes(blob[:-20])
    with pytest.raises(DataError):
        WeightStore.load(truncated)

    trailing = tmp_path / "trail.cfsrwt"
    trailing.write_bytes(blob + b"xx")
    with pytest.raises(DataError):
        WeightStore.load(trailing)

    with pytest.raises(DataError):
        WeightStore.load(tmp_path / "missing.cfsrwt")


def test_unknown_and_missing_tensor_names_are_rejected():
    from cfsr.weights import WeightStore
    model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(43))
    store = model.state()
    extra = WeightStore("branched")
    for name, arr in store.items():
        extra.add(name, arr)
    extra.add("mystery.kernel", np.zeros((1, 1, 1, 1), np.float32))
    with pytest.raises(ConfigError) as err:
        model.load_state(extra)
    assert "mystery.kernel" in str(err.value)

    partial = WeightStore("branched")
    names = store.names()
    for name in names[:-1]:
        partial.add(name, store.get(name))
    with pytest.raises(ConfigError) as err:
        model.load_state(partial)
    assert names[-1] in str(err.value)


def test_double_fusion_is_a_mode_error():
    model = CfsrModel(ModelConfig(**TINY), np.random.default_rng(44))
    model.fuse()
    with pytest.raises(ModeError):
        model.fuse()
    with pytest.raises(ModeError):
        fuse_store(model.state())


def test_merge_edc_bias_uses_laplacian_bias_not_kernel():
    # the bias blend must consume (1,C,1,1) biases; a kernel-shaped operand
    # would make the merged bias shape explode, which load/save would reject
    c = 3
    kernel, bias = merge_edc_branches(
        np.zeros((c, 1, 3, 3), np.float32),
        np.zeros((1, c, 1, 1), np.float32),
        np.zeros((1, c, 1, 1), np.float32),
        np.zeros((1, c, 1, 1), np.float32),
        np.zeros((1, c, 1, 1), np.float32),
        np.full((1, c, 1, 1), 3.0, np.float32),
        np.array([0.0, 0.0, 50.0], np.float32),
    )
    assert bias.shape == (1, c, 1, 1)
    assert np.allclose(bias, 3.0, atol=1e-5)  # alpha3 ~ 1, so B = B_lap4 + B_lap8
