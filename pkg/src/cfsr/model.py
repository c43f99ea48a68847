"""The CFSR network: gated large-kernel mixer blocks with an edge-preserving FFN.

Each ConvFormer layer pairs a large-kernel depth-wise gating mixer with a
feed-forward network whose depth-wise stage (the EDC) trains as five parallel
branches: one learnable 3x3 kernel plus fixed Sobel and Laplacian kernels with
learnable biases, blended by softmax competition coefficients.  All branches
are linear, so they collapse into a single depth-wise convolution for
inference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ModeError, ShapeError
from .layers import (
    Conv2dWeights,
    DwConvWeights,
    _corr_dw,
    _corr_dw_wgrad,
    conv1x1,
    conv2d,
    dwconv,
    gelu,
    kaiming_uniform,
    pixel_shuffle,
    softmax3,
)
from .tensor import Tensor, accumulate_grad, active_tape, add, mul_elementwise, tape_record
from .weights import WeightStore

SOBEL_X = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=np.float32)
SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float32)
LAPLACE4 = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float32)
LAPLACE8 = np.array([[1, 1, 1], [1, -8, 1], [1, 1, 1]], dtype=np.float32)

MODES = ("branched", "fused")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the standard CFSR sizing."""

    channels: int = 48
    n_brb: int = 2
    n_cfl_per_brb: int = 6
    mixer_kernel: int = 9   # k1
    edc_kernel: int = 3     # k2, fixed by the EDC branch kernels
    scale: int = 4
    efn_expansion: float = 2.0

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.n_brb < 1 or self.n_cfl_per_brb < 1:
            raise ConfigError("block counts must be >= 1")
        if self.mixer_kernel % 2 == 0:
            raise ConfigError(f"mixer kernel k1 must be odd, got {self.mixer_kernel}")
        if self.edc_kernel != 3:
            raise ConfigError("the EDC kernel size is fixed at 3")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be one of 2, 3, 4; got {self.scale}")
        hidden = self.efn_expansion * self.channels
        if abs(hidden - round(hidden)) > 1e-9:
            raise ConfigError(
                f"efn_expansion * channels must be integral, got {hidden}"
            )

    @property
    def hidden(self) -> int:
        return int(round(self.efn_expansion * self.channels))


def _expand_fixed(kernel: np.ndarray, channels: int) -> np.ndarray:
    """Repeat a 3x3 prior across channels as a read-only (C,1,3,3) stack."""
    out = np.ascontiguousarray(
        np.broadcast_to(kernel.astype(np.float32), (channels, 1, 3, 3))
    )
    out.flags.writeable = False
    return out


def merge_edc_branches(
    kernel: np.ndarray,
    bias: np.ndarray,
    bias_sobel_x: np.ndarray,
    bias_sobel_y: np.ndarray,
    bias_lap4: np.ndarray,
    bias_lap8: np.ndarray,
    logits: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Collapse the five EDC branches into one depth-wise kernel and bias.

    K = a1*K3x3 + a2*(Kdx + Kdy) + a3*(Klap4 + Klap8), and the same blend over
    the branch biases, with (a1, a2, a3) = softmax(logits).
    """
    a = softmax3(logits)
    sob = (SOBEL_X + SOBEL_Y).astype(np.float64)
    lap = (LAPLACE4 + LAPLACE8).astype(np.float64)
    merged_k = a[0] * np.asarray(kernel, np.float64)
    merged_k = merged_k + (a[1] * sob + a[2] * lap)[None, None]
    merged_b = (
        a[0] * np.asarray(bias, np.float64)
        + a[1] * (np.asarray(bias_sobel_x, np.float64) + np.asarray(bias_sobel_y, np.float64))
        + a[2] * (np.asarray(bias_lap4, np.float64) + np.asarray(bias_lap8, np.float64))
    )
    return merged_k.astype(np.float32), merged_b.astype(np.float32)


class EdgeDwConv:
    """Training-form EDC: learnable 3x3 depth-wise kernel + fixed gradient priors.

    The fixed Sobel/Laplacian kernels receive no gradient; their biases and the
    competition logits do.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.kernel = Tensor(kaiming_uniform((channels, 1, 3, 3), 9, rng), requires_grad=True)
        self.bias = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.bias_sobel_x = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.bias_sobel_y = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.bias_lap4 = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        self.bias_lap8 = Tensor(np.zeros((1, channels, 1, 1)), requires_grad=True)
        # equal thirds at step 0: no branch dominates before training
        self.logits = Tensor(np.zeros((1, 3, 1, 1)), requires_grad=True)
        self.sobel_x = _expand_fixed(SOBEL_X, channels)
        self.sobel_y = _expand_fixed(SOBEL_Y, channels)
        self.lap4 = _expand_fixed(LAPLACE4, channels)
        self.lap8 = _expand_fixed(LAPLACE8, channels)

    def named_params(self, prefix: str):
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias
        yield f"{prefix}.bias_sobel_x", self.bias_sobel_x
        yield f"{prefix}.bias_sobel_y", self.bias_sobel_y
        yield f"{prefix}.bias_lap4", self.bias_lap4
        yield f"{prefix}.bias_lap8", self.bias_lap8
        yield f"{prefix}.logits", self.logits

    def fused_weights(self) -> tuple[np.ndarray, np.ndarray]:
        return merge_edc_branches(
            self.kernel.data,
            self.bias.data,
            self.bias_sobel_x.data,
            self.bias_sobel_y.data,
            self.bias_lap4.data,
            self.bias_lap8.data,
            self.logits.data,
        )


def edc_branched(x: Tensor, w: EdgeDwConv) -> Tensor:
    """Training-mode EDC forward: softmax-blended five-branch depth-wise conv.

    The blend is linear in the branches, so the forward pass is evaluated as a
    single depth-wise convolution with the branch-blended float64 kernel; one
    cast back to storage precision happens at the output.
    """
    if x.shape[1] != w.channels:
        raise ShapeError(f"EDC expects {w.channels} channels, got input of shape {x.shape}")
    alpha = softmax3(w.logits.data)
    k33 = np.asarray(w.kernel.data[:, 0], np.float64)
    sob = np.asarray(w.sobel_x[:, 0] + w.sobel_y[:, 0], np.float64)
    lap = np.asarray(w.lap4[:, 0] + w.lap8[:, 0], np.float64)
    kmix = alpha[0] * k33 + alpha[1] * sob + alpha[2] * lap
    b33 = np.asarray(w.bias.data, np.float64)
    b_sob = np.asarray(w.bias_sobel_x.data, np.float64) + np.asarray(w.bias_sobel_y.data, np.float64)
    b_lap = np.asarray(w.bias_lap4.data, np.float64) + np.asarray(w.bias_lap8.data, np.float64)
    bmix = alpha[0] * b33 + alpha[1] * b_sob + alpha[2] * b_lap
    out = Tensor(_corr_dw(x.data, kmix) + bmix)

    x_val = x.data
    learnables = (
        w.kernel, w.bias, w.bias_sobel_x, w.bias_sobel_y, w.bias_lap4, w.bias_lap8, w.logits
    )
    wants = x.requires_grad or any(p.requires_grad for p in learnables)

    def backprop(g: np.ndarray) -> None:
        g64 = np.asarray(g, np.float64)
        gsum = g64.sum(axis=(0, 2, 3))                      # (C,)
        dkmix = _corr_dw_wgrad(x_val, g64, 3)               # (C,3,3)
        if w.kernel.requires_grad:
            accumulate_grad(w.kernel, alpha[0] * dkmix[:, None])
        gsum_col = gsum.reshape(1, -1, 1, 1)
        if w.bias.requires_grad:
            accumulate_grad(w.bias, alpha[0] * gsum_col)
        if w.bias_sobel_x.requires_grad:
            accumulate_grad(w.bias_sobel_x, alpha[1] * gsum_col)
        if w.bias_sobel_y.requires_grad:
            accumulate_grad(w.bias_sobel_y, alpha[1] * gsum_col)
        if w.bias_lap4.requires_grad:
            accumulate_grad(w.bias_lap4, alpha[2] * gsum_col)
        if w.bias_lap8.requires_grad:
            accumulate_grad(w.bias_lap8, alpha[2] * gsum_col)
        if w.logits.requires_grad:
            # dL/d(alpha_i) = <g, F_i> = <dkmix, K_i> + <gsum, B_i>
            dalpha = np.array([
                float((dkmix * k33).sum() + (gsum * b33.reshape(-1)).sum()),
                float((dkmix * sob).sum() + (gsum * b_sob.reshape(-1)).sum()),
                float((dkmix * lap).sum() + (gsum * b_lap.reshape(-1)).sum()),
            ])
            dlogits = alpha * (dalpha - float(alpha @ dalpha))
            accumulate_grad(w.logits, dlogits.reshape(1, 3, 1, 1))
        if x.requires_grad:
            accumulate_grad(x, _corr_dw(g64, kmix[:, ::-1, ::-1]))

    return tape_record(out, wants, backprop)


class EdgeFfn:
    """Feed-forward half of the block: expand 1x1 -> GELU -> EDC -> project 1x1."""

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.expand = Conv2dWeights.conv1x1(channels, hidden, rng)
        self.edc: EdgeDwConv | None = EdgeDwConv(hidden, rng)
        self.fused_edc: DwConvWeights | None = None
        self.project = Conv2dWeights.conv1x1(hidden, channels, rng)

    @property
    def mode(self) -> str:
        return "branched" if self.fused_edc is None else "fused"

    def fuse(self) -> None:
        if self.fused_edc is not None:
            raise ModeError("EDC is already fused")
        kernel, bias = self.edc.fused_weights()
        self.fused_edc = DwConvWeights(Tensor(kernel), Tensor(bias))
        self.edc = None

    def install_fused(self, channels: int) -> None:
        """Swap in placeholder fused weights (used when loading fused stores)."""
        self.fused_edc = DwConvWeights(
            Tensor(np.zeros((channels, 1, 3, 3))), Tensor(np.zeros((1, channels, 1, 1)))
        )
        self.edc = None

    def __call__(self, x: Tensor) -> Tensor:
        t = conv1x1(x, self.expand)
        t = gelu(t)
        if self.fused_edc is None:
            t = edc_branched(t, self.edc)
        else:
            if active_tape() is not None:
                raise ModeError(
                    "fused EDC is inference-only; gradients require branched mode"
                )
            t = dwconv(t, self.fused_edc)
        return conv1x1(t, self.project)

    def named_params(self, prefix: str):
        yield f"{prefix}.expand.kernel", self.expand.kernel
        yield f"{prefix}.expand.bias", self.expand.bias
        if self.fused_edc is None:
            yield from self.edc.named_params(f"{prefix}.edc")
        else:
            yield f"{prefix}.edc.kernel", self.fused_edc.kernel
            yield f"{prefix}.edc.bias", self.fused_edc.bias
        yield f"{prefix}.project.kernel", self.project.kernel
        yield f"{prefix}.project.bias", self.project.bias


class LargeKernelMixer:
    """Gated spatial mixer: 1x1 value path, 1x1 -> large depth-wise gate, 1x1 out."""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        self.value = Conv2dWeights.conv1x1(channels, channels, rng)
        self.gate_in = Conv2dWeights.conv1x1(channels, channels, rng)
        self.gate_dw = DwConvWeights.initialize(channels, kernel_size, rng)
        self.out = Conv2dWeights.conv1x1(channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        v = conv1x1(x, self.value)
        gate = dwconv(conv1x1(x, self.gate_in), self.gate_dw)
        return conv1x1(mul_elementwise(v, gate), self.out)

    def named_params(self, prefix: str):
        for name, w in (
            ("value", self.value),
            ("gate_in", self.gate_in),
            ("gate_dw", self.gate_dw),
            ("out", self.out),
        ):
            yield f"{prefix}.{name}.kernel", w.kernel
            yield f"{prefix}.{name}.bias", w.bias


class ConvFormerLayer:
    """Mixer and FFN, each wrapped in a residual add."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.mixer = LargeKernelMixer(cfg.channels, cfg.mixer_kernel, rng)
        self.ffn = EdgeFfn(cfg.channels, cfg.hidden, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.mixer(x))
        return add(x, self.ffn(x))

    def named_params(self, prefix: str):
        yield from self.mixer.named_params(f"{prefix}.mixer")
        yield from self.ffn.named_params(f"{prefix}.ffn")


class ResidualBlock:
    """Stack of ConvFormer layers, a trailing 3x3 conv, and a block residual."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.layers = [ConvFormerLayer(cfg, rng) for _ in range(cfg.n_cfl_per_brb)]
        self.tail = Conv2dWeights.initialize(cfg.channels, cfg.channels, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        y = x
        for layer in self.layers:
            y = layer(y)
        return add(conv2d(y, self.tail), x)

    def named_params(self, prefix: str):
        for j, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.cfl{j}")
        yield f"{prefix}.tail.kernel", self.tail.kernel
        yield f"{prefix}.tail.bias", self.tail.bias


class CfsrModel:
    """Full network: shallow 3x3 conv, residual ConvFormer blocks, upsampling head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None,
                 mode: str = "branched"):
        if mode not in MODES:
            raise ConfigError(f"model mode must be one of {MODES}, got {mode!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.shallow = Conv2dWeights.initialize(3, cfg.channels, 3, rng)
        self.blocks = [ResidualBlock(cfg, rng) for _ in range(cfg.n_brb)]
        self.recon = Conv2dWeights.initialize(
            cfg.channels, 3 * cfg.scale * cfg.scale, 3, rng
        )
        if mode == "fused":
            for block in self.blocks:
                for layer in block.layers:
                    layer.ffn.install_fused(cfg.hidden)

    @property
    def mode(self) -> str:
        modes = {layer.ffn.mode for block in self.blocks for layer in block.layers}
        if len(modes) != 1:
            raise ModeError("model is in a mixed branched/fused state")
        return modes.pop()

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != 3:
            raise ShapeError(f"model expects RGB input (N,3,H,W), got {x.shape}")
        f0 = conv2d(x, self.shallow)
        f = f0
        for block in self.blocks:
            f = block(f)
        f = add(f, f0)
        return pixel_shuffle(conv2d(f, self.recon), self.cfg.scale)

    def fuse(self) -> None:
        """Collapse every EDC into its single inference kernel, in place."""
        if self.mode == "fused":
            raise ModeError("model is already fused")
        for block in self.blocks:
            for layer in block.layers:
                layer.ffn.fuse()

    def named_params(self):
        yield "shallow.kernel", self.shallow.kernel
        yield "shallow.bias", self.shallow.bias
        for i, block in enumerate(self.blocks):
            yield from block.named_params(f"brb{i}")
        yield "recon.kernel", self.recon.kernel
        yield "recon.bias", self.recon.bias

    def learnable_params(self):
        return [(n, p) for n, p in self.named_params() if p.requires_grad]

    def num_params(self) -> int:
        return sum(p.numel for _, p in self.named_params())

    def state(self) -> WeightStore:
        store = WeightStore(self.mode)
        for name, p in self.named_params():
            store.add(name, p.data)
        return store

    def load_state(self, store: WeightStore) -> None:
        if store.mode != self.mode:
            raise ModeError(
                f"{store.mode}-mode weights cannot load into a {self.mode}-mode model"
            )
        params = dict(self.named_params())
        unknown = [n for n in store.names() if n not in params]
        if unknown:
            raise ConfigError(f"unknown tensor name in weight store: {unknown[0]!r}")
        missing = [n for n in params if n not in store]
        if missing:
            raise ConfigError(f"weight store is missing tensor {missing[0]!r}")
        for name, p in params.items():
            arr = store.get(name)
            if arr.shape != p.shape:
                raise ShapeError(
                    f"shape mismatch for {name!r}: weight file has {arr.shape}, "
                    f"model config needs {p.shape}"
                )
        for name, p in params.items():
            p.data = np.ascontiguousarray(store.get(name), dtype=p.data.dtype)
            p.grad = None


# ---------------------------------------------------------------------------
# store-level fusion (no model construction required)

_EDC_BRANCH_SUFFIXES = (
    ".edc.bias_sobel_x", ".edc.bias_sobel_y", ".edc.bias_lap4", ".edc.bias_lap8", ".edc.logits",
)


def fuse_store(store: WeightStore) -> WeightStore:
    """Return a fused copy of a branched weight store.

    Per EDC, the merged kernel/bias replace the branched entries; branch biases
    and logits are dropped, so the fused store is strictly smaller.
    """
    if store.mode == "fused":
        raise ModeError("weight store is already fused")
    fused = WeightStore("fused")
    for name, arr in store.items():
        if name.endswith(".edc.kernel"):
            prefix = name[: -len(".kernel")]
            try:
                kernel, bias = merge_edc_branches(
                    arr,
                    store.get(f"{prefix}.bias"),
                    store.get(f"{prefix}.bias_sobel_x"),
                    store.get(f"{prefix}.bias_sobel_y"),
                    store.get(f"{prefix}.bias_lap4"),
                    store.get(f"{prefix}.bias_lap8"),
                    store.get(f"{prefix}.logits"),
                )
            except ConfigError as exc:
                raise ConfigError(f"incomplete EDC group at {prefix!r}: {exc}") from exc
            fused.add(name, kernel)
            fused.add(f"{prefix}.bias", bias)
        elif name.endswith(".edc.bias") or name.endswith(_EDC_BRANCH_SUFFIXES):
            continue
        else:
            fused.add(name, arr)
    return fused
