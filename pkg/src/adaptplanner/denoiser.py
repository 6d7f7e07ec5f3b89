"""Trainable noise-prediction network: temporal-conv residual blocks with a
timestep embedding, plus hand-written reverse-mode gradients, Adam, and the
training loop. Everything runs in double precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import rng_stream
from .diffusion import NoiseSchedule
from .errors import EmptyPool, InvalidConfig, NonFiniteLoss, ShapeMismatch
from .trajectory import STATE_DIM, WIDTH

_GN_EPS = 1e-5


@dataclass(frozen=True)
class DenoiserArch:
    """Shape descriptor: fully determines every weight grid.

    `dilations` widens each block's temporal reach so a short stack can span
    the whole planning horizon; with one value per block the receptive field
    is 1 + 2*(kernel_size-1)*sum(dilations).
    """

    width: int = 32
    blocks: int = 3
    kernel_size: int = 5
    embed_dim: int = 32
    groups: int = 8
    dilations: tuple = (1, 4, 16)
    in_channels: int = WIDTH

    def __post_init__(self):
        if self.width < 1 or self.blocks < 1:
            raise InvalidConfig("width and blocks must be positive")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise InvalidConfig("kernel_size must be odd")
        if self.embed_dim % 2 or self.embed_dim < 2:
            raise InvalidConfig("embed_dim must be even and >= 2")
        if self.width % self.effective_groups:
            raise InvalidConfig("width must be divisible by the group count")
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.dilations) != self.blocks:
            raise InvalidConfig("need one dilation per block")
        if any(d < 1 for d in self.dilations):
            raise InvalidConfig("dilations must be >= 1")

    @property
    def effective_groups(self) -> int:
        return self.groups if self.width >= self.groups else self.width

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "blocks": self.blocks,
            "kernel_size": self.kernel_size,
            "embed_dim": self.embed_dim,
            "groups": self.groups,
            "dilations": list(self.dilations),
            "in_channels": self.in_channels,
        }


@dataclass
class DenoiserParams:
    """Named weight grids for one network, tagged with its evolution phase."""

    arch: DenoiserArch
    weights: dict
    phase_tag: int = 0

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            arch=self.arch,
            weights={k: v.copy() for k, v in self.weights.items()},
            phase_tag=self.phase_tag,
        )

    def predict_noise(self, values: np.ndarray, i: int) -> np.ndarray:
        """Single-trajectory forward pass: (rows, 6) -> (rows, 6)."""
        out = forward(self, values[None, :, :], np.array([i]))
        return out[0]


@dataclass
class OptState:
    """Adam accumulators; shapes mirror the parameter grids."""

    m: dict
    v: dict
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def fresh(params: DenoiserParams, lr: float = 2e-4) -> "OptState":
        zeros = {k: np.zeros_like(w) for k, w in params.weights.items()}
        return OptState(
            m=zeros, v={k: np.zeros_like(w) for k, w in params.weights.items()}, lr=lr
        )


# ---------------------------------------------------------------------------
# parameter construction


def _param_shapes(arch: DenoiserArch) -> dict:
    shapes = {}
    c_in = arch.in_channels
    for b in range(arch.blocks):
        w = arch.width
        shapes[f"block{b}.conv1.w"] = (w, c_in, arch.kernel_size)
        shapes[f"block{b}.conv1.b"] = (w,)
        shapes[f"block{b}.emb.w"] = (w, arch.embed_dim)
        shapes[f"block{b}.emb.b"] = (w,)
        shapes[f"block{b}.gn1.gamma"] = (w,)
        shapes[f"block{b}.gn1.beta"] = (w,)
        shapes[f"block{b}.conv2.w"] = (w, w, arch.kernel_size)
        shapes[f"block{b}.conv2.b"] = (w,)
        shapes[f"block{b}.gn2.gamma"] = (w,)
        shapes[f"block{b}.gn2.beta"] = (w,)
        if c_in != w:
            shapes[f"block{b}.skip.w"] = (w, c_in, 1)
            shapes[f"block{b}.skip.b"] = (w,)
        c_in = w
    shapes["out.w"] = (arch.in_channels, c_in, 1)
    shapes["out.b"] = (arch.in_channels,)
    return shapes


def fan_in_scale(shape: tuple) -> float:
    """Uniform init bound 1/sqrt(fan_in); fan-in is everything but the out axis."""
    fan_in = 1
    for dim in shape[1:]:
        fan_in *= dim
    return 1.0 / np.sqrt(fan_in)


def init_params(arch: DenoiserArch, seed: int) -> DenoiserParams:
    """Fan-in-scaled uniform init; norms at identity; output layer zeroed."""
    rng = rng_stream(seed, "denoiser-init")
    weights = {}
    for name, shape in _param_shapes(arch).items():
        if name.startswith("out."):
            weights[name] = np.zeros(shape)
        elif name.endswith(".gamma"):
            weights[name] = np.ones(shape)
        elif name.endswith((".beta", ".b")):
            weights[name] = np.zeros(shape)
        else:
            bound = fan_in_scale(shape)
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return DenoiserParams(arch=arch, weights=weights, phase_tag=0)


# ---------------------------------------------------------------------------
# layer primitives (forward + backward)


def _im2col(x: np.ndarray, k: int, dilation: int = 1) -> np.ndarray:
    """(B, T, C) -> (B*T, K*C) same-padded patch matrix, patches in (k, c) order.

    With time-major storage each patch is a strided block copy rather than a
    gather. Dilation picks every d-th tap of a widened window.
    """
    batch, t, channels = x.shape
    if k == 1:
        return np.ascontiguousarray(x).reshape(batch * t, channels)
    pad = dilation * (k // 2)
    x_pad = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    span = (k - 1) * dilation + 1
    view = sliding_window_view(x_pad, span, axis=1)  # (B, T, C, span)
    if dilation > 1:
        view = view[:, :, :, ::dilation]
    return np.ascontiguousarray(view.transpose(0, 1, 3, 2)).reshape(batch * t, k * channels)


def _conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int = 1, cache: list | None = None):
    """Same-padded (optionally dilated) temporal convolution as one GEMM.

    x: (B, T, C), w: (O, C, K) -> (B, T, O). When `cache` is given, the patch
    matrix is appended for reuse in backward.
    """
    batch, t, _ = x.shape
    out, _, k = w.shape
    cols = _im2col(x, k, dilation)
    w_flat = np.ascontiguousarray(w.transpose(0, 2, 1)).reshape(out, -1)
    y = (cols @ w_flat.T).reshape(batch, t, out)
    if cache is not None:
        cache.append(cols)
    return y + b[None, None, :]


def _conv1d_bwd(dy: np.ndarray, cols: np.ndarray, w: np.ndarray, dilation: int = 1):
    """Gradients of _conv1d given the cached patch matrix. Returns (dx, dw, db)."""
    out, c_in, k = w.shape
    batch, t, _ = dy.shape
    dy_flat = np.ascontiguousarray(dy).reshape(batch * t, out)
    dw = (dy_flat.T @ cols).reshape(out, k, c_in).transpose(0, 2, 1).copy()
    db = dy_flat.sum(axis=0)
    # input gradient = same-padded conv of dy with the kernel transposed in
    # (out, in) and flipped along the window axis, at the same dilation
    if k == 1:
        dx = (dy_flat @ w[:, :, 0]).reshape(batch, t, c_in)
    else:
        w_t = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 2, 0)).reshape(c_in, -1)
        dy_cols = _im2col(dy, k, dilation)
        dx = (dy_cols @ w_t.T).reshape(batch, t, c_in)
    return dx, dw, db


def _groupnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int):
    """Normalize per (sample, group) over the time axis and the group's channels.

    x: (B, T, C); gamma/beta: (C,).
    """
    batch, t, channels = x.shape
    xg = x.reshape(batch, t, groups, channels // groups)
    mean = xg.mean(axis=(1, 3), keepdims=True)
    var = xg.var(axis=(1, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _GN_EPS)
    xhat = ((xg - mean) * inv_std).reshape(batch, t, channels)
    y = gamma[None, None, :] * xhat + beta[None, None, :]
    return y, (xhat, inv_std, gamma, groups)


def _groupnorm_bwd(dy: np.ndarray, cache):
    xhat, inv_std, gamma, groups = cache
    batch, t, channels = dy.shape
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = (dy * gamma[None, None, :]).reshape(batch, t, groups, channels // groups)
    xhat_g = xhat.reshape(batch, t, groups, channels // groups)
    mean_d = dxhat.mean(axis=(1, 3), keepdims=True)
    mean_dx = (dxhat * xhat_g).mean(axis=(1, 3), keepdims=True)
    dx = inv_std * (dxhat - mean_d - xhat_g * mean_dx)
    return dx.reshape(batch, t, channels), dgamma, dbeta


def _mish(x: np.ndarray):
    """x * tanh(softplus(x)) via tanh(ln z) = (z^2 - 1)/(z^2 + 1) with z = 1 + e^x.

    One exp and one division; the clamp keeps e^2x finite and costs < 1e-26
    relative error beyond it.
    """
    e = np.exp(np.minimum(x, 30.0))
    v = e * (e + 2.0)
    tanh_sp = v / (v + 2.0)
    y = x * tanh_sp
    return y, (x, tanh_sp, e)


def _mish_bwd(dy: np.ndarray, cache):
    x, tanh_sp, e = cache
    sig = e / (e + 1.0)
    return dy * (tanh_sp + x * (1.0 - tanh_sp * tanh_sp) * sig)


def sinusoidal_features(ts: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos features of the diffusion index: (B,) -> (B, dim)."""
    half = dim // 2
    denom = max(half - 1, 1)
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / denom)
    args = np.asarray(ts, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------------------
# network forward / backward


def _net_forward(params: DenoiserParams, x: np.ndarray, ts: np.ndarray, keep_cache: bool):
    arch = params.arch
    wts = params.weights
    feats = sinusoidal_features(ts, arch.embed_dim)
    h = x
    cache = []
    for b in range(arch.blocks):
        pre = f"block{b}"
        dil = arch.dilations[b]
        rec = {} if keep_cache else None
        cols = [] if keep_cache else None
        c1 = _conv1d(h, wts[f"{pre}.conv1.w"], wts[f"{pre}.conv1.b"], dil, cols)
        emb = feats @ wts[f"{pre}.emb.w"].T + wts[f"{pre}.emb.b"]
        c1 = c1 + emb[:, None, :]
        g1, gn1_cache = _groupnorm(
            c1, wts[f"{pre}.gn1.gamma"], wts[f"{pre}.gn1.beta"], arch.effective_groups
        )
        m1, m1_cache = _mish(g1)
        c2 = _conv1d(m1, wts[f"{pre}.conv2.w"], wts[f"{pre}.conv2.b"], dil, cols)
        g2, gn2_cache = _groupnorm(
            c2, wts[f"{pre}.gn2.gamma"], wts[f"{pre}.gn2.beta"], arch.effective_groups
        )
        m2, m2_cache = _mish(g2)
        if f"{pre}.skip.w" in wts:
            skip = _conv1d(h, wts[f"{pre}.skip.w"], wts[f"{pre}.skip.b"], 1, cols)
        else:
            skip = h
        out = m2 + skip
        if keep_cache:
            rec.update(cols=cols, gn1=gn1_cache, m1=m1_cache, gn2=gn2_cache, m2=m2_cache)
            cache.append(rec)
        h = out
    out_cols = [] if keep_cache else None
    y = _conv1d(h, wts["out.w"], wts["out.b"], 1, out_cols)
    if keep_cache:
        cache.append({"cols": out_cols, "feats": feats})
    return y, cache


def _net_backward(params: DenoiserParams, dy: np.ndarray, cache) -> dict:
    arch = params.arch
    wts = params.weights
    grads = {k: None for k in wts}
    feats = cache[-1]["feats"]
    dh, grads["out.w"], grads["out.b"] = _conv1d_bwd(dy, cache[-1]["cols"][0], wts["out.w"])
    for b in range(arch.blocks - 1, -1, -1):
        pre = f"block{b}"
        dil = arch.dilations[b]
        rec = cache[b]
        cols = rec["cols"]
        dm2 = _mish_bwd(dh, rec["m2"])
        dc2, grads[f"{pre}.gn2.gamma"], grads[f"{pre}.gn2.beta"] = _groupnorm_bwd(dm2, rec["gn2"])
        dm1, grads[f"{pre}.conv2.w"], grads[f"{pre}.conv2.b"] = _conv1d_bwd(
            dc2, cols[1], wts[f"{pre}.conv2.w"], dil
        )
        dg1 = _mish_bwd(dm1, rec["m1"])
        dc1, grads[f"{pre}.gn1.gamma"], grads[f"{pre}.gn1.beta"] = _groupnorm_bwd(dg1, rec["gn1"])
        demb = dc1.sum(axis=1)  # (B, W)
        grads[f"{pre}.emb.w"] = demb.T @ feats
        grads[f"{pre}.emb.b"] = demb.sum(axis=0)
        dh_in, grads[f"{pre}.conv1.w"], grads[f"{pre}.conv1.b"] = _conv1d_bwd(
            dc1, cols[0], wts[f"{pre}.conv1.w"], dil
        )
        if f"{pre}.skip.w" in wts:
            dskip, grads[f"{pre}.skip.w"], grads[f"{pre}.skip.b"] = _conv1d_bwd(
                dh, cols[2], wts[f"{pre}.skip.w"], 1
            )
            dh = dh_in + dskip
        else:
            dh = dh_in + dh
    return grads


def forward(params: DenoiserParams, batch: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Noise prediction for a batch. batch: (B, rows, 6), ts: (B,) -> (B, rows, 6)."""
    batch = np.ascontiguousarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[2] != params.arch.in_channels:
        raise ShapeMismatch(f"expected (B, rows, {params.arch.in_channels}), got {batch.shape}")
    y, _ = _net_forward(params, batch, np.asarray(ts), keep_cache=False)
    return y


# ---------------------------------------------------------------------------
# loss and gradients


def loss_mask(shape: tuple) -> np.ndarray:
    """Ones everywhere except the inpaint-conditioned row-0 state columns."""
    mask = np.ones(shape)
    mask[:, 0, :STATE_DIM] = 0.0
    return mask


def _draw_corruption(sched: NoiseSchedule, batch: np.ndarray, rng: np.random.Generator):
    n = batch.shape[0]
    ts = rng.integers(1, sched.n_steps + 1, size=n)
    eps = rng.standard_normal(batch.shape)
    abar = sched.alpha_bars[ts][:, None, None]
    tau_i = np.sqrt(abar) * batch + np.sqrt(1.0 - abar) * eps
    return ts, eps, tau_i


def denoise_loss(
    sched: NoiseSchedule, params: DenoiserParams, batch: np.ndarray, rng: np.random.Generator
) -> float:
    """Masked mean-squared noise-prediction error on one corrupted batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ShapeMismatch("batch must be (B, rows, 6) with B >= 1")
    ts, eps, tau_i = _draw_corruption(sched, batch, rng)
    eps_hat = forward(params, tau_i, ts)
    mask = loss_mask(batch.shape)
    return float(((eps_hat - eps) ** 2 * mask).sum() / mask.sum())


def gradients(
    sched: NoiseSchedule, params: DenoiserParams, batch: np.ndarray, rng: np.random.Generator
):
    """Loss plus exact reverse-mode parameter gradients for one corrupted batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ShapeMismatch("batch must be (B, rows, 6) with B >= 1")
    ts, eps, tau_i = _draw_corruption(sched, batch, rng)
    eps_hat, cache = _net_forward(params, tau_i, ts, keep_cache=True)
    mask = loss_mask(batch.shape)
    count = mask.sum()
    residual = (eps_hat - eps) * mask
    loss = float((residual**2).sum() / count)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    grads = _net_backward(params, 2.0 * residual / count, cache)
    return loss, grads


def adam_step(params: DenoiserParams, grads: dict, opt: OptState):
    """Bias-corrected Adam update; returns fresh (params, opt)."""
    new_w, new_m, new_v = {}, {}, {}
    step = opt.step + 1
    bc1 = 1.0 - opt.beta1**step
    bc2 = 1.0 - opt.beta2**step
    for name, w in params.weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != weight shape {w.shape} for {name}")
        m = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g**2
        new_w[name] = w - opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        new_m[name], new_v[name] = m, v
    return (
        DenoiserParams(arch=params.arch, weights=new_w, phase_tag=params.phase_tag),
        OptState(m=new_m, v=new_v, step=step, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps),
    )


def train(
    sched: NoiseSchedule,
    pool,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    horizon: int,
    start: DenoiserParams | None = None,
    arch: DenoiserArch | None = None,
    history: list | None = None,
    log_every: int = 100,
) -> DenoiserParams:
    """Run `steps` Adam iterations on batches drawn uniformly from the pool.

    With `start` given this is fine-tuning (the caller picks the reduced step
    count); otherwise a fresh fan-in init from `arch` is trained. Deterministic
    given the seed. `history` collects (step, loss) pairs when provided.
    """
    if len(pool) == 0:
        raise EmptyPool("cannot train on an empty pool")
    if start is not None:
        params = start.copy()
    else:
        if arch is None:
            raise InvalidConfig("train needs either start params or an architecture")
        params = init_params(arch, seed)
    if steps == 0:
        return params
    opt = OptState.fresh(params, lr=lr)
    rng = rng_stream(seed, "train")
    for it in range(steps):
        batch = pool.training_batch(rng, batch_size, horizon)
        loss, grads = gradients(sched, params, batch, rng)
        params, opt = adam_step(params, grads, opt)
        if history is not None and (it % log_every == 0 or it == steps - 1):
            history.append((it, loss))
    return params
