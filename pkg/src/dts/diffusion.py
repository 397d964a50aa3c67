"""Forward noising and reverse sampling for label-space Gaussian diffusion.

The segmentation target lives in [-1, 1] (one-hot soft labels mapped through
2*y - 1).  Noise is added with the closed form

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps,   eps ~ N(0, I)

and the network predicts eps, from which x0 is recovered algebraically.
All randomness is caller-supplied (explicit tensors or integer seeds), so every
operation here is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from dts.errors import ConfigError, ContractError

Tensor = torch.Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta[t] and cached cumulative products alpha_bar[t]."""

    T: int
    beta: Tensor        # float64, shape (T,)
    alpha_bar: Tensor   # float64, shape (T,), alpha_bar[t] = prod_{s<=t} (1 - beta[s])

    def alpha_bar_at(self, t, like: Tensor) -> Tensor:
        """alpha_bar[t] broadcast against a (B, C, H, W) or (C, H, W) tensor."""
        a = self.alpha_bar[self._as_index(t)].to(like.dtype)
        return self._expand(a, like)

    def beta_at(self, t, like: Tensor) -> Tensor:
        b = self.beta[self._as_index(t)].to(like.dtype)
        return self._expand(b, like)

    def alpha_bar_prev_at(self, t, like: Tensor) -> Tensor:
        """alpha_bar[t-1], with the t=0 convention alpha_bar[-1] = 1."""
        idx = self._as_index(t)
        prev = torch.where(
            idx > 0,
            self.alpha_bar[torch.clamp(idx - 1, min=0)],
            torch.ones_like(self.alpha_bar[idx]),
        )
        return self._expand(prev.to(like.dtype), like)

    def _as_index(self, t) -> Tensor:
        idx = torch.as_tensor(t, dtype=torch.long)
        if torch.any(idx < 0) or torch.any(idx >= self.T):
            raise ContractError(f"step index {t} outside [0, {self.T})")
        return idx

    @staticmethod
    def _expand(v: Tensor, like: Tensor) -> Tensor:
        if v.ndim == 0:
            return v
        # one scalar per batch element
        return v.view(-1, *([1] * (like.ndim - 1)))


def build_schedule(T: int, kind: str = "linear", beta_start: float = 1e-4,
                   beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from beta_start to beta_end over T steps.

    Raises ConfigError for T < 1, betas outside (0, 1), or beta_start > beta_end.
    """
    if T < 1:
        raise ConfigError(f"step count must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got "
            f"({beta_start}, {beta_end})")
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def subschedule(s: NoiseSchedule, steps: int) -> tuple[NoiseSchedule, Tensor]:
    """Uniformly strided sub-schedule used for accelerated sampling.

    Picks `steps` indices t_0=0 < ... < t_{steps-1}=T-1 and rebuilds per-step
    betas so that the sub-schedule's own cumulative products equal
    alpha_bar[t_k].  Returns (schedule over the subsequence, selected t values).
    """
    if steps < 1:
        raise ConfigError(f"sampling steps must be >= 1, got {steps}")
    if steps > s.T:
        raise ConfigError(f"sampling steps {steps} exceed schedule length {s.T}")
    if steps == 1:
        ts = torch.tensor([s.T - 1], dtype=torch.long)
    else:
        ts = torch.unique(torch.round(torch.linspace(0, s.T - 1, steps)).long())
    abar = s.alpha_bar[ts]
    abar_prev = torch.cat([torch.ones(1, dtype=torch.float64), abar[:-1]])
    beta = 1.0 - abar / abar_prev
    return NoiseSchedule(T=len(ts), beta=beta, alpha_bar=abar), ts


def q_sample(x0: Tensor, t, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """Forward-noise x0 to step t: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    if eps.shape != x0.shape:
        raise ContractError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    abar = s.alpha_bar_at(t, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def predict_x0(x_t: Tensor, t, eps_hat: Tensor, s: NoiseSchedule,
               clamp: bool = False) -> Tensor:
    """Invert q_sample under the eps parameterization.

    x0 = (x_t - sqrt(1-abar)*eps_hat) / sqrt(abar), optionally clamped to [-1, 1].
    """
    if eps_hat.shape != x_t.shape:
        raise ContractError(
            f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    abar = s.alpha_bar_at(t, x_t)
    x0 = (x_t - torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(abar)
    if clamp:
        x0 = torch.clamp(x0, -1.0, 1.0)
    return x0


def p_sample_step(x_t: Tensor, t, eps_hat: Tensor, s: NoiseSchedule,
                  noise: Tensor) -> Tensor:
    """One ancestral reverse step t -> t-1.

    x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(1-beta_t) + sigma_t * z
    with sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t); sigma_0 = 0, so the
    noise argument is ignored at t = 0.
    """
    if eps_hat.shape != x_t.shape:
        raise ContractError(
            f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    beta = s.beta_at(t, x_t)
    abar = s.alpha_bar_at(t, x_t)
    abar_prev = s.alpha_bar_prev_at(t, x_t)
    mean = (x_t - beta / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(1.0 - beta)
    sigma2 = beta * (1.0 - abar_prev) / (1.0 - abar)
    return mean + torch.sqrt(sigma2) * noise


def decode_soft_label(x0: Tensor, eps: float = 1e-3) -> Tensor:
    """Map an x0 estimate back to per-pixel probabilities on the simplex.

    Renormalizes (x0+1)/2 across channels with additive smoothing eps; bare
    division has unbounded gradients as the channel sum approaches zero
    (e.g. a denoiser that momentarily pushes every channel toward -1), which
    destabilizes any loss backpropagated through the decode.  Smoothing keeps
    the output an exact simplex, degrades to uniform at an all-floor pixel,
    and bounds the quotient's gradients by 1/eps.
    """
    p = torch.clamp((x0 + 1.0) / 2.0, min=0.0)
    C = p.shape[-3]
    total = p.sum(dim=-3, keepdim=True)
    return (p + eps) / (total + C * eps)


def sample_segmentation(
    model: Callable[[Tensor, Tensor, int], Tensor],
    image: Tensor,
    schedule: NoiseSchedule,
    num_classes: int,
    steps: int = 50,
    ensemble: int = 1,
    seed: int = 0,
    member_seeds: Optional[Sequence[int]] = None,
    clip_denoised: bool = True,
) -> Tensor:
    """Run the reverse chain from pure noise and decode a soft label map.

    `model(x_t, image, t)` must return the predicted noise with x_t's shape.
    When steps < T the chain runs over a uniformly strided subsequence of the
    schedule; the model is always queried with the original step values.
    Ensemble members use independent noise streams and their decoded
    probability maps are averaged then renormalized.

    clip_denoised clamps the implied x0 to the valid label range [-1, 1] at
    every step and feeds the noise consistent with the clamped estimate into
    the posterior update.  Without it, model error off the training manifold
    compounds through the 1/sqrt(1-beta) factor and long chains diverge
    (state norm grows by orders of magnitude, predictions collapse to the
    majority class); with an in-range x0 the clamp is a no-op.
    """
    if ensemble < 1:
        raise ConfigError(f"ensemble size must be >= 1, got {ensemble}")
    sub, ts = subschedule(schedule, steps)
    H, W = image.shape[-2], image.shape[-1]
    if member_seeds is None:
        member_seeds = [seed + 1000003 * m for m in range(ensemble)]
    elif len(member_seeds) != ensemble:
        raise ContractError("member_seeds length must equal ensemble size")

    acc = torch.zeros(num_classes, H, W, dtype=image.dtype)
    for mseed in member_seeds:
        g = torch.Generator().manual_seed(int(mseed))
        x = torch.randn(num_classes, H, W, generator=g, dtype=image.dtype)
        for k in range(sub.T - 1, -1, -1):
            eps_hat = model(x, image, int(ts[k]))
            if clip_denoised:
                abar = sub.alpha_bar_at(k, x)
                x0_hat = predict_x0(x, k, eps_hat, sub, clamp=True)
                eps_hat = (x - torch.sqrt(abar) * x0_hat) / torch.sqrt(
                    1.0 - abar)
            noise = torch.randn(x.shape, generator=g, dtype=image.dtype)
            x = p_sample_step(x, k, eps_hat, sub, noise)
        acc += decode_soft_label(x)
    prob = acc / ensemble
    return prob / prob.sum(dim=0, keepdim=True)
