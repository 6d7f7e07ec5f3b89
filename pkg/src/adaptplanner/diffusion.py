"""DDPM math over trajectory grids: noise schedule, forward corruption,
guided reverse sampling with inpainting, and value normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, ShapeMismatch
from .trajectory import STATE_DIM, WIDTH, Trajectory

CLIP_BOX = 1.5  # sampled values are kept inside [-CLIP_BOX, CLIP_BOX]


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process parameters indexed 0..N; index 0 is the clean convention."""

    n_steps: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    posterior_variances: np.ndarray = field(repr=False)
    kind: str = "cosine"

    def check_index(self, i: int) -> int:
        i = int(i)
        if not 1 <= i <= self.n_steps:
            raise InvalidConfig(f"diffusion index {i} outside 1..{self.n_steps}")
        return i


def build_schedule(n_steps: int, kind: str = "cosine") -> NoiseSchedule:
    """Cosine (s=0.008, betas clipped at 0.999) or linear [1e-4, 2e-2] schedule."""
    if n_steps < 2:
        raise InvalidConfig("schedule needs n_steps >= 2")
    n = int(n_steps)
    if kind == "cosine":
        s = 0.008
        i = np.arange(n + 1, dtype=np.float64)
        f = np.cos(((i / n + s) / (1.0 + s)) * np.pi / 2.0) ** 2
        alpha_bars = f / f[0]
        betas = np.zeros(n + 1)
        betas[1:] = np.clip(1.0 - alpha_bars[1:] / alpha_bars[:-1], 0.0, 0.999)
        # rebuild alpha_bars from the clipped betas so the arrays stay consistent
        alphas = 1.0 - betas
        alphas[0] = 1.0
        alpha_bars = np.cumprod(alphas)
    elif kind == "linear":
        betas = np.zeros(n + 1)
        betas[1:] = np.linspace(1e-4, 2e-2, n)
        alphas = 1.0 - betas
        alphas[0] = 1.0
        alpha_bars = np.cumprod(alphas)
    else:
        raise InvalidConfig(f"unknown schedule kind {kind!r}")
    post = np.zeros(n + 1)
    post[1:] = betas[1:] * (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:])
    return NoiseSchedule(
        n_steps=n,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_variances=post,
        kind=kind,
    )


# ---------------------------------------------------------------------------
# normalization


@dataclass
class Normalizer:
    """Per-column affine map between data units and the [-1, 1] training box."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64).reshape(WIDTH)
        self.maxs = np.asarray(self.maxs, dtype=np.float64).reshape(WIDTH)
        if not np.all(self.maxs > self.mins):
            raise InvalidConfig("normalizer requires max > min for every column")

    @staticmethod
    def fit(trajectories, min_spread: float = 1e-6) -> "Normalizer":
        stacked = np.vstack([t.values if isinstance(t, Trajectory) else t for t in trajectories])
        mins = stacked.min(axis=0)
        maxs = stacked.max(axis=0)
        narrow = (maxs - mins) < min_spread
        mins[narrow] -= 0.5
        maxs[narrow] += 0.5
        return Normalizer(mins, maxs)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return 2.0 * (values - self.mins) / (self.maxs - self.mins) - 1.0

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return (values + 1.0) * (self.maxs - self.mins) / 2.0 + self.mins

    def grad_scale(self) -> np.ndarray:
        """d(data units)/d(normalized units), one factor per column."""
        return (self.maxs - self.mins) / 2.0


# ---------------------------------------------------------------------------
# conditioning


@dataclass(frozen=True)
class InpaintConstraint:
    """Fix `values` into columns [col_start, col_stop) of one row at every reverse step."""

    row: int
    col_start: int
    col_stop: int
    values: tuple

    def __post_init__(self):
        if not 0 <= self.col_start < self.col_stop <= STATE_DIM:
            raise InvalidConfig("inpaint columns must lie within the state columns")
        if len(self.values) != self.col_stop - self.col_start:
            raise InvalidConfig("inpaint value count does not match the column range")


@dataclass
class GuidanceSpec:
    """What steers the reverse process: gradient guidance, inpainting, or both."""

    mode: str = "none"  # none | return | coin
    scale: float = 0.0
    gamma: float = 1.0
    inpaint: tuple = ()
    coin: object | None = None  # guidance.CoinGuidance
    reward: object | None = None  # guidance.RewardFn for mode == "return"

    def __post_init__(self):
        if self.mode not in ("none", "return", "coin"):
            raise InvalidConfig(f"unknown guidance mode {self.mode!r}")
        if not (0.0 < self.gamma <= 1.0):
            raise InvalidConfig("gamma must lie in (0, 1]")
        seen = set()
        for con in self.inpaint:
            for col in range(con.col_start, con.col_stop):
                if (con.row, col) in seen:
                    raise InvalidConfig(f"duplicate inpaint assignment at {(con.row, col)}")
                seen.add((con.row, col))

    def check_rows(self, horizon: int) -> None:
        for con in self.inpaint:
            if not 0 <= con.row < horizon:
                raise InvalidConfig(f"inpaint row {con.row} outside horizon {horizon}")


def apply_inpaint(values: np.ndarray, constraints) -> np.ndarray:
    for con in constraints:
        values[con.row, con.col_start : con.col_stop] = con.values
    return values


# ---------------------------------------------------------------------------
# forward / reverse kernels


def _grid(values) -> np.ndarray:
    arr = values.values if isinstance(values, Trajectory) else np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != WIDTH:
        raise ShapeMismatch(f"expected (rows, {WIDTH}) grid, got {arr.shape}")
    return arr


def q_sample(sched: NoiseSchedule, tau0, i: int, eps: np.ndarray) -> np.ndarray:
    """Closed-form i-fold corruption: sqrt(abar_i) tau0 + sqrt(1 - abar_i) eps."""
    tau0 = _grid(tau0)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != tau0.shape:
        raise ShapeMismatch(f"noise shape {eps.shape} != data shape {tau0.shape}")
    i = sched.check_index(i)
    abar = sched.alpha_bars[i]
    return np.sqrt(abar) * tau0 + np.sqrt(1.0 - abar) * eps


def posterior_mean_from_eps(sched: NoiseSchedule, tau_i, i: int, eps_hat: np.ndarray) -> np.ndarray:
    """Reverse-step mean implied by a noise estimate:
    (tau_i - beta_i / sqrt(1 - abar_i) * eps_hat) / sqrt(alpha_i)."""
    tau_i = _grid(tau_i)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != tau_i.shape:
        raise ShapeMismatch(f"eps shape {eps_hat.shape} != data shape {tau_i.shape}")
    i = sched.check_index(i)
    coef = sched.betas[i] / np.sqrt(1.0 - sched.alpha_bars[i])
    return (tau_i - coef * eps_hat) / np.sqrt(sched.alphas[i])


def p_sample_step(
    sched: NoiseSchedule,
    model_eps: np.ndarray,
    tau_i,
    i: int,
    guide: GuidanceSpec,
    g: np.ndarray | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """One guided reverse step: mean + scale * variance * g, plus posterior noise.

    No noise is injected at i == 1; the result is clipped to the sampling box and
    then the inpaint constraints are substituted in.
    """
    tau_i = _grid(tau_i)
    i = sched.check_index(i)
    mean = posterior_mean_from_eps(sched, tau_i, i, model_eps)
    var = sched.posterior_variances[i]
    if g is not None and guide.scale != 0.0:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != tau_i.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != data shape {tau_i.shape}")
        mean = mean + guide.scale * var * g
    if i > 1:
        mean = mean + np.sqrt(var) * rng.standard_normal(tau_i.shape)
    out = np.clip(mean, -CLIP_BOX, CLIP_BOX)
    return apply_inpaint(out, guide.inpaint)


def guidance_gradient(mu: np.ndarray, guide: GuidanceSpec, normalizer: Normalizer) -> np.ndarray | None:
    """Reward gradient at the current reverse-step mean, in normalized coordinates."""
    if guide.mode == "none" or guide.scale == 0.0:
        return None
    from . import guidance as G  # local import keeps the math layer free of reward deps

    mu_data = normalizer.denormalize(mu)
    if guide.mode == "coin":
        _, grad = G.coin_gradient(mu_data, guide.coin, normalizer)
    else:
        grad = G.grad_return(mu_data, guide.reward, guide.gamma, normalizer)
    return grad


def sample_trajectory(
    sched: NoiseSchedule,
    model,
    guide: GuidanceSpec,
    horizon: int,
    seed: int,
    normalizer: Normalizer,
) -> Trajectory:
    """Iterate guided reverse steps from pure noise down to a denormalized plan.

    `model` must expose predict_noise(values, i) -> same-shape noise estimate.
    Deterministic given the seed.
    """
    from .config import rng_stream

    guide.check_rows(horizon)
    rng = rng_stream(seed, "sample")
    tau = rng.standard_normal((horizon, WIDTH))
    apply_inpaint(tau, guide.inpaint)
    for i in range(sched.n_steps, 0, -1):
        eps_hat = model.predict_noise(tau, i)
        mu = posterior_mean_from_eps(sched, tau, i, eps_hat)
        g = guidance_gradient(mu, guide, normalizer)
        tau = p_sample_step(sched, eps_hat, tau, i, guide, g, rng)
    return Trajectory(normalizer.denormalize(tau))
