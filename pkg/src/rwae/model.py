"""Recurrent encoders, learned motion prior and recurrent decoder.

Generative side: ``z_c ~ N(0, I)``, ``z_m_t ~ p_psi(z_m_t | z_m_<t)`` and a
deterministic decoder ``x_t = G(z_c, z_m_t [, a])`` driven by a gated
recurrence. Inference side: ``q(z_c | x_1:T)`` from a recurrence over all
frame features, and ``q(z_m_t | z_m_<t, x_t)`` stepped along the sequence
with the sampled code fed back at every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidArgumentError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class GaussianParams:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise InvalidArgumentError(
                f"mean/log_var shape mismatch: {tuple(self.mean.shape)} vs {tuple(self.log_var.shape)}"
            )


@dataclass
class LatentCode:
    """``z_c``: (B, d_c). ``z_m``: (B, T, d_m). ``a``: (B, A) or None."""

    z_c: Tensor
    z_m: Tensor
    a: Optional[Tensor] = None


def reparam_sample(p: GaussianParams, eps: Tensor) -> Tensor:
    """``mean + exp(log_var / 2) * eps`` with log-variance clamped to [-10, 10]."""
    if eps.shape != p.mean.shape:
        raise InvalidArgumentError(f"noise shape {tuple(eps.shape)} != mean shape {tuple(p.mean.shape)}")
    log_var = p.log_var.clamp(LOGVAR_MIN, LOGVAR_MAX)
    return p.mean + torch.exp(0.5 * log_var) * eps


def _gaussian_head(h: Tensor, head: nn.Linear) -> GaussianParams:
    mean, log_var = head(h).chunk(2, dim=-1)
    return GaussianParams(mean, log_var.clamp(LOGVAR_MIN, LOGVAR_MAX))


def gumbel_softmax_sample(log_alpha: Tensor, tau: float, g: Tensor) -> Tensor:
    """Concrete relaxation: ``softmax((log_alpha + g) / tau)`` over the last axis."""
    if not tau > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {tau}")
    return torch.softmax((log_alpha + g) / tau, dim=-1)


def sample_gumbel(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    tiny = torch.finfo(dtype).tiny
    return -torch.log((-torch.log(u.clamp_min(tiny))).clamp_min(tiny))


def _kl_to_uniform(probs: Tensor) -> Tensor:
    n_classes = probs.shape[-1]
    return torch.special.xlogy(probs, probs * n_classes).sum(-1)


def categorical_kl_to_uniform(probs: Tensor, atol: float = 1e-6) -> Tensor:
    """KL(Cat(probs) || uniform) = sum_j p_j log(p_j A), with 0 log 0 = 0.

    Accepts a single simplex vector or a batch (..., A).
    """
    probs = torch.as_tensor(probs)
    if probs.shape[-1] < 1:
        raise InvalidArgumentError("need at least one class")
    if (probs < 0).any() or (probs > 1).any():
        raise InvalidArgumentError("class probabilities must lie in [0, 1]")
    if ((probs.sum(-1) - 1.0).abs() > atol).any():
        raise InvalidArgumentError("class probabilities must sum to 1")
    return _kl_to_uniform(probs)


class FrameEncoder(nn.Module):
    """Per-frame feature extractor ``x_t -> h_t``."""

    def __init__(self, frame_shape, feature_dim: int, hidden_dim: int, kind: str = "mlp"):
        super().__init__()
        c, h, w = frame_shape
        if kind == "mlp":
            self.net = nn.Sequential(
                nn.Flatten(),
                nn.Linear(c * h * w, hidden_dim),
                nn.LeakyReLU(0.2),
                nn.Linear(hidden_dim, feature_dim),
                nn.LeakyReLU(0.2),
            )
        elif kind == "conv":
            if h % 4 or w % 4:
                raise InvalidArgumentError("conv encoder needs frame sides divisible by 4")
            self.net = nn.Sequential(
                nn.Conv2d(c, 32, 4, 2, 1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(32, 64, 4, 2, 1),
                nn.LeakyReLU(0.2),
                nn.Flatten(),
                nn.Linear(64 * (h // 4) * (w // 4), feature_dim),
                nn.LeakyReLU(0.2),
            )
        else:
            raise InvalidArgumentError(f"unknown encoder kind {kind!r}")

    def forward(self, frames: Tensor) -> Tensor:
        return self.net(frames)


class FrameDecoder(nn.Module):
    """Decoder recurrence output ``h_t -> x_t`` with sigmoid pixels."""

    def __init__(self, frame_shape, hidden_dim: int, mlp_dim: int, kind: str = "mlp"):
        super().__init__()
        self.frame_shape = tuple(frame_shape)
        c, h, w = frame_shape
        if kind == "mlp":
            self.net = nn.Sequential(
                nn.Linear(hidden_dim, mlp_dim),
                nn.LeakyReLU(0.2),
                nn.Linear(mlp_dim, c * h * w),
            )
        elif kind == "conv":
            self.net = nn.Sequential(
                nn.Linear(hidden_dim, 64 * (h // 4) * (w // 4)),
                nn.LeakyReLU(0.2),
                nn.Unflatten(1, (64, h // 4, w // 4)),
                nn.ConvTranspose2d(64, 32, 4, 2, 1),
                nn.LeakyReLU(0.2),
                nn.ConvTranspose2d(32, c, 4, 2, 1),
                nn.Flatten(),
            )
        else:
            raise InvalidArgumentError(f"unknown decoder kind {kind!r}")

    def forward(self, h: Tensor) -> Tensor:
        return torch.sigmoid(self.net(h)).view(h.shape[0], *self.frame_shape)


class RWAE(nn.Module):
    """Encoders (phi), motion prior (psi) and decoder (theta).

    The critic lives in a separate module (see ``Critic``) because it has its
    own optimizer.
    """

    def __init__(
        self,
        frame_shape,
        d_c: int = 16,
        d_m: int = 4,
        n_actions: int = 0,
        feature_dim: int = 128,
        hidden_dim: int = 128,
        mlp_dim: int = 256,
        arch: str = "mlp",
    ):
        super().__init__()
        self.frame_shape = tuple(int(s) for s in frame_shape)
        self.d_c, self.d_m, self.n_actions = d_c, d_m, n_actions
        self.hidden_dim = hidden_dim
        a_dim = n_actions

        # phi
        self.frame_encoder = FrameEncoder(self.frame_shape, feature_dim, mlp_dim, arch)
        self.static_rnn = nn.GRU(feature_dim, hidden_dim, batch_first=True)
        self.static_head = nn.Linear(hidden_dim, 2 * d_c)
        self.dynamic_cell = nn.GRUCell(feature_dim + d_m, hidden_dim)
        self.dynamic_head = nn.Linear(hidden_dim, 2 * d_m)
        if n_actions:
            self.action_rnn = nn.GRU(d_m, hidden_dim, batch_first=True)
            self.action_head = nn.Linear(hidden_dim, n_actions)

        # psi
        self.prior_cell = nn.GRUCell(d_m + a_dim, hidden_dim)
        self.prior_head = nn.Linear(hidden_dim, 2 * d_m)

        # theta
        self.decoder_in = nn.Sequential(nn.Linear(d_c + d_m + a_dim, hidden_dim), nn.LeakyReLU(0.2))
        self.decoder_cell = nn.GRUCell(hidden_dim, hidden_dim)
        self.frame_decoder = FrameDecoder(self.frame_shape, hidden_dim, mlp_dim, arch)

    # parameter groups -------------------------------------------------------

    def encoder_parameters(self):
        mods = [self.frame_encoder, self.static_rnn, self.static_head, self.dynamic_cell, self.dynamic_head]
        if self.n_actions:
            mods += [self.action_rnn, self.action_head]
        return [p for m in mods for p in m.parameters()]

    def prior_parameters(self):
        return list(self.prior_cell.parameters()) + list(self.prior_head.parameters())

    def decoder_parameters(self):
        mods = [self.decoder_in, self.decoder_cell, self.frame_decoder]
        return [p for m in mods for p in m.parameters()]

    # single-step pieces ----------------------------------------------------

    def initial_state(self, batch_size: int, like: Tensor | None = None) -> Tensor:
        ref = like if like is not None else next(self.parameters())
        return ref.new_zeros(batch_size, self.hidden_dim)

    def frame_features(self, x: Tensor) -> Tensor:
        """(B, T, C, H, W) -> (B, T, F)."""
        if x.dim() != 5 or x.shape[1] < 1:
            raise InvalidArgumentError(f"expected (B, T>=1, C, H, W) frames, got shape {tuple(x.shape)}")
        b, t = x.shape[:2]
        return self.frame_encoder(x.reshape(b * t, *x.shape[2:])).view(b, t, -1)

    def encode_static(self, x: Tensor, features: Tensor | None = None) -> GaussianParams:
        feats = self.frame_features(x) if features is None else features
        _, h_last = self.static_rnn(feats)
        return _gaussian_head(h_last[-1], self.static_head)

    def encode_dynamic_step(self, feature_t: Tensor, z_prev: Tensor, state: Tensor):
        """One step of q(z_m_t | z_m_<t, x_t). Returns (GaussianParams, new state).

        ``z_prev`` is the code sampled at the previous step (zeros at t=1);
        the recurrence state carries the rest of the history.
        """
        state = self.dynamic_cell(torch.cat([feature_t, z_prev], dim=-1), state)
        return _gaussian_head(state, self.dynamic_head), state

    def prior_dynamic_step(self, z_prev: Tensor, state: Tensor, a: Tensor | None = None):
        """One step of p_psi(z_m_t | z_m_<t). Both inputs are zeros at t=1."""
        inp = z_prev if a is None else torch.cat([z_prev, a], dim=-1)
        state = self.prior_cell(inp, state)
        return _gaussian_head(state, self.prior_head), state

    def decode_step(self, z_c: Tensor, z_m_t: Tensor, state: Tensor, a: Tensor | None = None):
        parts = [z_c, z_m_t] if a is None else [z_c, z_m_t, a]
        state = self.decoder_cell(self.decoder_in(torch.cat(parts, dim=-1)), state)
        return self.frame_decoder(state), state

    def action_logits(self, z_m: Tensor) -> Tensor:
        if not self.n_actions:
            raise InvalidArgumentError("model was built without an action variable")
        _, h_last = self.action_rnn(z_m)
        return self.action_head(h_last[-1])

    def infer_action(self, z_m: Tensor) -> Tensor:
        """Class probabilities of q(a | z_m_1:T), shape (B, A)."""
        return torch.softmax(self.action_logits(z_m), dim=-1)

    # whole-sequence helpers ------------------------------------------------

    def encode(self, x: Tensor, generator: torch.Generator | None = None, sample: bool = True):
        """Run both posteriors over a batch.

        With ``sample=False`` the posterior means are used (and fed back into
        the dynamic recurrence) so the result is noise free.

        Returns a dict with ``z_c`` (B, d_c), ``z_m`` (B, T, d_m) and the
        Gaussian parameters ``static`` and ``dynamic`` (stacked over T).
        """
        feats = self.frame_features(x)
        b, t = feats.shape[:2]
        static = self.encode_static(x, feats)
        z_c = reparam_sample(static, self._noise(static.mean, generator)) if sample else static.mean

        state = self.initial_state(b, feats)
        z_prev = feats.new_zeros(b, self.d_m)
        means, log_vars, zs = [], [], []
        for step in range(t):
            p, state = self.encode_dynamic_step(feats[:, step], z_prev, state)
            z_prev = reparam_sample(p, self._noise(p.mean, generator)) if sample else p.mean
            means.append(p.mean)
            log_vars.append(p.log_var)
            zs.append(z_prev)
        dynamic = GaussianParams(torch.stack(means, 1), torch.stack(log_vars, 1))
        return {"z_c": z_c, "z_m": torch.stack(zs, 1), "static": static, "dynamic": dynamic}

    def decode(self, z_c: Tensor, z_m: Tensor, a: Tensor | None = None) -> Tensor:
        """(B, d_c), (B, T, d_m) [, (B, A)] -> frames (B, T, C, H, W).

        The same ``z_c`` (and ``a``) row is reused at every step.
        """
        b, t = z_m.shape[:2]
        state = self.initial_state(b, z_m)
        frames = []
        for step in range(t):
            frame, state = self.decode_step(z_c, z_m[:, step], state, a)
            frames.append(frame)
        return torch.stack(frames, 1)

    def teacher_forced_prior(
        self, z_m_post: Tensor, generator: torch.Generator | None = None, a: Tensor | None = None
    ):
        """Prior samples ``z_t ~ p_psi(. | posterior history z_m_<t)`` for every t.

        Returns (samples (B, T, d_m), GaussianParams stacked over T).
        """
        b, t = z_m_post.shape[:2]
        state = self.initial_state(b, z_m_post)
        z_prev = z_m_post.new_zeros(b, self.d_m)
        samples, means, log_vars = [], [], []
        for step in range(t):
            p, state = self.prior_dynamic_step(z_prev, state, a)
            samples.append(reparam_sample(p, self._noise(p.mean, generator)))
            means.append(p.mean)
            log_vars.append(p.log_var)
            z_prev = z_m_post[:, step]
        return torch.stack(samples, 1), GaussianParams(torch.stack(means, 1), torch.stack(log_vars, 1))

    def prior_rollout(
        self, batch_size: int, steps: int, generator: torch.Generator | None = None, a: Tensor | None = None
    ) -> Tensor:
        """Unconditional motion codes (B, T, d_m) from the learned prior."""
        ref = next(self.parameters())
        state = self.initial_state(batch_size)
        z_prev = ref.new_zeros(batch_size, self.d_m)
        zs = []
        for _ in range(steps):
            p, state = self.prior_dynamic_step(z_prev, state, a)
            z_prev = reparam_sample(p, self._noise(p.mean, generator))
            zs.append(z_prev)
        return torch.stack(zs, 1)

    def reconstruct(self, x: Tensor) -> Tensor:
        """Decode the posterior means of ``x``."""
        enc = self.encode(x, sample=False)
        return self.decode(enc["z_c"], enc["z_m"], self.action_code(enc["z_m"]))

    def action_code(self, z_m: Tensor) -> Tensor | None:
        """Noise-free action input for the decoder: the one-hot argmax of q(a | z_m)."""
        if not self.n_actions:
            return None
        probs = self.infer_action(z_m)
        return F.one_hot(probs.argmax(-1), self.n_actions).to(probs.dtype)

    @staticmethod
    def _noise(like: Tensor, generator: torch.Generator | None) -> Tensor:
        return torch.randn(like.shape, generator=generator, dtype=like.dtype, device=like.device)


class Critic(nn.Module):
    """Fully connected critic on content codes.

    ``kind="feature_map"`` returns an unbounded scalar (scaled-MMD feature
    map); ``kind="discriminator"`` returns a probability.
    """

    def __init__(self, d_in: int, hidden=(128, 128), kind: str = "feature_map", spectral: bool = False):
        super().__init__()
        if kind not in ("feature_map", "discriminator"):
            raise InvalidArgumentError(f"unknown critic kind {kind!r}")
        self.kind = kind
        layers = []
        prev = d_in
        for width in list(hidden) + [1]:
            lin = nn.Linear(prev, width)
            if spectral:
                lin = nn.utils.parametrizations.spectral_norm(lin)
            layers += [lin, nn.LeakyReLU(0.2)]
            prev = width
        self.net = nn.Sequential(*layers[:-1])

    def forward(self, z: Tensor) -> Tensor:
        out = self.net(z).squeeze(-1)
        return torch.sigmoid(out) if self.kind == "discriminator" else out
