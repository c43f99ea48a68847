"""Analytic parameter and FLOP accounting.

FLOPs count multiply-accumulate operations of convolution kernels only
(the "Mult-Adds" convention): bias additions, activations, residual adds and
the mixer's elementwise gate product are excluded.  Parameters include biases
except in ``mixer_cost``, whose published formulas omit them.  All arithmetic
is plain Python int, so totals cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig

MIXER_KINDS = ("SA", "LWSA", "LK")


@dataclass
class CostReport:
    """Totals plus a per-layer (name, params, flops) breakdown."""

    params: int
    flops: int
    breakdown: list[tuple[str, int, int]]

    def text(self) -> str:
        rows = self.breakdown + [("total", self.params, self.flops)]
        name_w = max(len(r[0]) for r in rows)
        p_w = max(len(f"{r[1]:,}") for r in rows)
        f_w = max(len(f"{r[2]:,}") for r in rows)
        header = f"{'layer':<{name_w}}  {'params':>{p_w}}  {'flops':>{f_w}}"
        lines = [header, "-" * len(header)]
        for name, params, flops in self.breakdown:
            lines.append(f"{name:<{name_w}}  {params:>{p_w},}  {flops:>{f_w},}")
        lines.append("-" * len(header))
        lines.append(f"{'total':<{name_w}}  {self.params:>{p_w},}  {self.flops:>{f_w},}")
        return "\n".join(lines)

    def csv(self) -> str:
        lines = ["name,params,flops"]
        for name, params, flops in self.breakdown:
            lines.append(f"{name},{params},{flops}")
        lines.append(f"total,{self.params},{self.flops}")
        return "\n".join(lines)


def _report(breakdown: list[tuple[str, int, int]]) -> CostReport:
    return CostReport(
        params=sum(r[1] for r in breakdown),
        flops=sum(r[2] for r in breakdown),
        breakdown=breakdown,
    )


def mixer_cost(kind: str, h: int, w: int, c: int, k: int) -> CostReport:
    """Cost of one feature-mixer of the given family at an H x W x C feature map.

    SA   : flops 4HWC^2 + 2H^2W^2C, params 4C^2
    LWSA : flops 4HWC^2 + 2HWCK^2,  params 4C^2
    LK   : flops 3HWC^2 + HWCK^2,   params 3C^2 + CK^2
    """
    if min(h, w, c, k) < 1:
        raise ConfigError(f"dimensions must be positive, got H={h} W={w} C={c} K={k}")
    if kind == "SA":
        rows = [
            ("projections", 4 * c * c, 4 * h * w * c * c),
            ("attention-map", 0, 2 * h * h * w * w * c),
        ]
    elif kind == "LWSA":
        if k > min(h, w):
            raise ConfigError(f"window size K={k} exceeds feature map min(H,W)={min(h, w)}")
        rows = [
            ("projections", 4 * c * c, 4 * h * w * c * c),
            ("windowed-attention", 0, 2 * h * w * c * k * k),
        ]
    elif kind == "LK":
        if k % 2 == 0:
            raise ConfigError(f"LK kernel size must be odd, got {k}")
        rows = [
            ("pointwise", 3 * c * c, 3 * h * w * c * c),
            ("depthwise-gate", c * k * k, h * w * c * k * k),
        ]
    else:
        raise ConfigError(f"mixer kind must be one of {MIXER_KINDS}, got {kind!r}")
    return _report(rows)


def model_cost(cfg: ModelConfig, lr_h: int, lr_w: int, mode: str = "fused") -> CostReport:
    """Per-layer parameter and MAC counts for a whole configuration.

    ``lr_h``/``lr_w`` are the low-resolution input dimensions (HR dims divided
    by the scale).  ``mode`` selects EDC counting: "fused" (the inference
    default, one depth-wise conv) or "branched" (five training branches).
    """
    if lr_h < 1 or lr_w < 1:
        raise ConfigError(f"LR dimensions must be positive, got {lr_h}x{lr_w}")
    if mode not in ("fused", "branched"):
        raise ConfigError(f"mode must be 'fused' or 'branched', got {mode!r}")
    c = cfg.channels
    hidden = cfg.hidden
    k1 = cfg.mixer_kernel
    px = lr_h * lr_w

    def dense(name, cin, cout, k):
        return (name, cout * cin * k * k + cout, px * cout * cin * k * k)

    rows: list[tuple[str, int, int]] = [dense("shallow", 3, c, 3)]
    for i in range(cfg.n_brb):
        for j in range(cfg.n_cfl_per_brb):
            p = f"brb{i}.cfl{j}"
            mixer_params = 3 * (c * c + c) + (c * k1 * k1 + c)
            mixer_flops = px * (3 * c * c + c * k1 * k1)
            rows.append((f"{p}.mixer", mixer_params, mixer_flops))
            if mode == "fused":
                edc_params = hidden * 9 + hidden
                edc_flops = px * hidden * 9
            else:
                # learnable 3x3 + bias, four branch biases, three logits; five branch convs
                edc_params = hidden * 9 + hidden + 4 * hidden + 3
                edc_flops = px * 5 * hidden * 9
            ffn_params = (c * hidden + hidden) + edc_params + (hidden * c + c)
            ffn_flops = px * (c * hidden + hidden * c) + edc_flops
            rows.append((f"{p}.ffn", ffn_params, ffn_flops))
        rows.append(dense(f"brb{i}.tail", c, c, 3))
    rows.append(dense("recon", c, 3 * cfg.scale * cfg.scale, 3))
    return _report(rows)
