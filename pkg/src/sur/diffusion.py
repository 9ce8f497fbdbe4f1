"""Toy conditional diffusion model: schedule, noising, predictor, sampler.

The noise schedule follows the variance-preserving convention
``x_t = alpha_t * x0 + sigma_t * eps`` with ``alpha_t = sqrt(1 - sigma_t^2)``.
The epsilon predictor is a small frozen feed-forward network over the
concatenation of the flattened image, a sinusoidal step embedding, and a
condition vector; gradients flow through the condition, never into frozen
weights. Sampling is plain ancestral denoising with the posterior mean and
variance implied by the (alpha, sigma) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DimensionError, RangeError
from .optim import Adam, zero_grads
from .tensor import Tape, Tensor, as_tensor, backward
from .tnsio import read_hashed_bundle, write_hashed_bundle

TIME_DIM = 16
HIDDEN = 128


@dataclass(frozen=True)
class NoiseSchedule:
    sigma: np.ndarray
    alpha: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.sigma)


def make_schedule(steps: int = 50, sigma_min: float = 0.02, sigma_max: float = 0.999) -> NoiseSchedule:
    """Linear sigma ramp; the final sigma must sit close to 1."""
    if steps < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {steps}")
    if not 0.0 < sigma_min < sigma_max < 1.0:
        raise ConfigError(f"need 0 < sigma_min < sigma_max < 1, got {sigma_min}, {sigma_max}")
    if sigma_max < 0.99:
        raise ConfigError(f"sigma_max {sigma_max} too far from 1 for sampling to start from noise")
    sigma = np.linspace(sigma_min, sigma_max, steps)
    alpha = np.sqrt(1.0 - sigma * sigma)
    return NoiseSchedule(sigma=sigma, alpha=alpha)


def forward_noise(x0, t: int, eps, sched: NoiseSchedule) -> Tensor:
    """Closed-form corruption alpha_t * x0 + sigma_t * eps at step t."""
    if not 0 <= t < sched.steps:
        raise RangeError(f"step {t} outside 0..{sched.steps - 1}")
    x0a = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    epsa = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if x0a.shape != epsa.shape:
        raise DimensionError(f"x0 shape {x0a.shape} vs eps shape {epsa.shape}")
    return Tensor(sched.alpha[t] * x0a + sched.sigma[t] * epsa)


def time_embedding(t: int, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal embedding of a step index, injective on small integer ranges."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = float(t) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])[None, :]


def condition_pool(cond_tokens: Tensor) -> Tensor:
    """Mean over token rows; padding rows are included since the blended
    condition is dense over the full window."""
    return tz.mean_rows(cond_tokens)


@dataclass
class Denoiser:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    resolution: int
    d_cond: int
    time_dim: int
    seed: int

    def params(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def freeze(self) -> None:
        for p in self.params().values():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.params().values():
            p.requires_grad = True


def new_denoiser(seed: int, resolution: int = 8, d_cond: int = 48,
                 hidden: int = HIDDEN, time_dim: int = TIME_DIM) -> Denoiser:
    rng = np.random.default_rng([int(seed), 4])

    def layer(n_in, n_out):
        std = np.float32((1.0 / n_in) ** 0.5)
        w = (rng.standard_normal((n_in, n_out), dtype=np.float32) * std).astype(np.float64)
        b = np.zeros(n_out)
        return Tensor(w), Tensor(b)

    d_in = resolution * resolution + time_dim + d_cond
    w1, b1 = layer(d_in, hidden)
    w2, b2 = layer(hidden, hidden)
    w3, b3 = layer(hidden, resolution * resolution)
    return Denoiser(w1, b1, w2, b2, w3, b3,
                    resolution=resolution, d_cond=d_cond, time_dim=time_dim, seed=int(seed))


def predict_eps(den: Denoiser, xt, t: int, cond: Tensor) -> Tensor:
    """Noise estimate for a corrupted image at step t under a condition vector.

    Deterministic in its inputs. When ``cond`` is gradient-tracked the
    estimate participates in the tape, so losses built on it differentiate
    back to the condition (and to the weights, if those are unfrozen).
    """
    xt = as_tensor(xt)
    cond = as_tensor(cond)
    res = den.resolution
    if xt.shape != (res, res):
        raise DimensionError(f"expected a {res}x{res} image, got shape {xt.shape}")
    if cond.shape != (den.d_cond,):
        raise DimensionError(f"expected condition of length {den.d_cond}, got shape {cond.shape}")
    flat = tz.reshape(xt, (1, res * res))
    temb = Tensor(time_embedding(t, den.time_dim))
    cond_row = tz.reshape(cond, (1, den.d_cond))
    x = tz.concat_cols([flat, temb, cond_row])
    h = tz.tanh(tz.add_rowvec(tz.matmul(x, den.w1), den.b1))
    h = tz.tanh(tz.add_rowvec(tz.matmul(h, den.w2), den.b2))
    out = tz.add_rowvec(tz.matmul(h, den.w3), den.b3)
    return tz.reshape(out, (res, res))


def simple_loss(den: Denoiser, x0, t: int, eps, cond: Tensor, sched: NoiseSchedule) -> Tensor:
    """Noise-prediction objective: mse between eps and the model's estimate."""
    xt = forward_noise(x0, t, eps, sched)
    eps_hat = predict_eps(den, xt, t, cond)
    return tz.mse(as_tensor(eps), eps_hat)


def ddpm_sample(den: Denoiser, sched: NoiseSchedule, cond, rng_seed: int) -> Tensor:
    """Ancestral sampling from pure noise down to a clean image.

    Starts at x ~ N(0, I), then repeatedly applies the posterior mean and
    variance implied by the schedule's cumulative signal level. The output
    is a pure function of (weights, cond, seed).
    """
    cond = as_tensor(cond)
    rng = np.random.default_rng(int(rng_seed))
    res = den.resolution
    x = rng.standard_normal((res, res))
    abar = sched.alpha * sched.alpha
    for t in range(sched.steps - 1, 0, -1):
        eps_hat = predict_eps(den, Tensor(x), t, cond).data
        a_t = abar[t] / abar[t - 1]
        beta = 1.0 - a_t
        mean = (x - beta / np.sqrt(1.0 - abar[t]) * eps_hat) / np.sqrt(a_t)
        var = beta * (1.0 - abar[t - 1]) / (1.0 - abar[t])
        x = mean + np.sqrt(var) * rng.standard_normal((res, res))
    eps_hat = predict_eps(den, Tensor(x), 0, cond).data
    x0 = (x - sched.sigma[0] * eps_hat) / sched.alpha[0]
    return Tensor(x0)


def pretrain_denoiser(den: Denoiser, sched: NoiseSchedule,
                      examples: list[tuple[np.ndarray, np.ndarray]],
                      steps: int = 1200, batch_size: int = 8,
                      lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Fit the predictor on (image, condition) pairs, then freeze it.

    This is the one-off step that produces the frozen fixture every adapter
    experiment builds on. Returns the per-step loss history.
    """
    if not examples:
        raise ConfigError("pretraining needs at least one example")
    den.unfreeze()
    params = den.params()
    opt = Adam(params, lr)
    rng = np.random.default_rng([int(seed), 5])
    history = []
    n = len(examples)
    for _ in range(steps):
        idx = rng.integers(0, n, size=batch_size)
        with Tape() as tape:
            terms = []
            for i in idx:
                image, cond = examples[int(i)]
                t = int(rng.integers(0, sched.steps))
                eps = rng.standard_normal(image.shape)
                terms.append(simple_loss(den, image, t, eps, Tensor(cond), sched))
            loss = tz.mean_of(terms)
        backward(loss, tape)
        opt.step()
        zero_grads(params)
        history.append(loss.item())
    den.freeze()
    return history


def save_denoiser(den: Denoiser, sched: NoiseSchedule, out_dir) -> None:
    manifest = {
        "kind": "denoiser",
        "seed": den.seed,
        "resolution": den.resolution,
        "d_cond": den.d_cond,
        "time_dim": den.time_dim,
        "hidden": den.w1.shape[1],
        "schedule": {
            "steps": sched.steps,
            "sigma_min": float(sched.sigma[0]),
            "sigma_max": float(sched.sigma[-1]),
        },
    }
    tensors = {k: p.data for k, p in den.params().items()}
    write_hashed_bundle(out_dir, manifest, tensors)


def load_denoiser(in_dir) -> tuple[Denoiser, NoiseSchedule]:
    manifest, tensors = read_hashed_bundle(in_dir)
    if manifest.get("kind") != "denoiser":
        raise ConfigError(f"{in_dir} is not a denoiser checkpoint")
    den = Denoiser(
        w1=Tensor(tensors["w1"]), b1=Tensor(tensors["b1"]),
        w2=Tensor(tensors["w2"]), b2=Tensor(tensors["b2"]),
        w3=Tensor(tensors["w3"]), b3=Tensor(tensors["b3"]),
        resolution=manifest["resolution"], d_cond=manifest["d_cond"],
        time_dim=manifest["time_dim"], seed=manifest["seed"],
    )
    s = manifest["schedule"]
    sched = make_schedule(s["steps"], s["sigma_min"], s["sigma_max"])
    return den, sched
