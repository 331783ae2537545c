"""Kernels and latent-space regularizers.

Three ways of comparing a batch of posterior codes with a batch of prior
codes are provided:

* ``mmd2_unbiased`` with a mixture-of-RBF kernel (used for the motion codes),
* ``scaled_mmd_penalty`` with a learned scalar feature map whose gradient
  norm at the prior samples scales the estimate down,
* ``gan_regularizer_losses``, a discriminator objective with a gradient
  penalty at interpolated points plus the matching encoder loss.

All functions take torch tensors of shape ``(n, d)`` and are differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor

from .errors import InvalidArgumentError, NumericError

DEFAULT_BANDWIDTHS = (1.0, 2.0, 4.0, 8.0, 16.0)

# D outputs are clamped into this interval before taking logs.
PROB_EPS = 1e-7

# Coefficient of the gradient term in the scaled-MMD denominator.
SCALED_MMD_GRAD_WEIGHT = 10.0

GramFn = Callable[[Tensor, Tensor], Tensor]


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.dim() != 2 or y.dim() != 2:
        raise InvalidArgumentError(
            f"sample sets must be 2-d (n, d), got shapes {tuple(x.shape)} and {tuple(y.shape)}"
        )
    if x.shape[1] != y.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")


def _as_points(x: Tensor) -> Tensor:
    x = torch.as_tensor(x)
    if x.dim() == 1:
        x = x.unsqueeze(1)
    return x


@dataclass(frozen=True)
class KernelSpec:
    """Mixture of RBF kernels, summed over the listed bandwidths."""

    bandwidths: tuple[float, ...] = DEFAULT_BANDWIDTHS

    def __post_init__(self):
        bw = tuple(float(b) for b in self.bandwidths)
        if not bw:
            raise InvalidArgumentError("KernelSpec needs at least one bandwidth")
        if any(not (b > 0.0) or b == float("inf") for b in bw):
            raise InvalidArgumentError(f"bandwidths must be positive and finite, got {bw}")
        object.__setattr__(self, "bandwidths", bw)

    def __call__(self, x: Tensor, y: Tensor) -> Tensor:
        return kernel_gram(x, y, self)


def _sq_dists(x: Tensor, y: Tensor) -> Tensor:
    # Explicit differences rather than the ||x||^2 - 2xy + ||y||^2 expansion:
    # exact zero on the diagonal and bitwise symmetric under argument swap.
    diff = x.unsqueeze(1) - y.unsqueeze(0)
    return diff.pow(2).sum(-1)


def kernel_gram(x: Tensor, y: Tensor, kernel: KernelSpec | None = None) -> Tensor:
    """Gram matrix ``K[i, j] = sum_s exp(-|x_i - y_j|^2 / (2 s^2))``.

    Args:
        x: Samples of shape (n, d).
        y: Samples of shape (m, d).
        kernel: Bandwidths of the mixture. Defaults to ``KernelSpec()``.

    Returns:
        Tensor of shape (n, m).
    """
    kernel = kernel or KernelSpec()
    x, y = _as_points(x), _as_points(y)
    _check_pair(x, y)
    d2 = _sq_dists(x, y)
    gram = torch.zeros_like(d2)
    for s in kernel.bandwidths:
        gram = gram + torch.exp(-d2 / (2.0 * s * s))
    return gram


def linear_kernel(x: Tensor, y: Tensor) -> Tensor:
    """``k(x, y) = x . y``. Only meant for checking estimators against hand sums."""
    x, y = _as_points(x), _as_points(y)
    _check_pair(x, y)
    return (x.unsqueeze(1) * y.unsqueeze(0)).sum(-1)


def mmd2_unbiased(x: Tensor, y: Tensor, kernel: KernelSpec | GramFn | None = None) -> Tensor:
    """Unbiased estimate of the squared MMD between the laws of ``x`` and ``y``.

    Within-set averages exclude the diagonal; the cross term is
    ``2 / (n m) * sum_ij k(x_i, y_j)``. The result can be negative.

    Args:
        x: Samples of shape (n, d), n >= 2.
        y: Samples of shape (m, d), m >= 2.
        kernel: A ``KernelSpec`` or any callable returning a gram matrix.
    """
    gram: GramFn = kernel if kernel is not None else KernelSpec()
    x, y = _as_points(x), _as_points(y)
    _check_pair(x, y)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise InvalidArgumentError(f"unbiased MMD needs at least 2 samples per set, got n={n}, m={m}")

    kxx = gram(x, x)
    kyy = gram(y, y)
    within_x = (kxx.sum() - kxx.diagonal().sum()) / (n * (n - 1))
    within_y = (kyy.sum() - kyy.diagonal().sum()) / (m * (m - 1))
    # Both orientations of the cross gram so that swapping x and y gives the
    # same floating-point result.
    cross = (gram(x, y).sum() + gram(y, x).sum()) / (n * m)
    return (within_x + within_y) - cross


def mmd2_unbiased_stacked(x: Tensor, y: Tensor, kernel: KernelSpec | None = None) -> Tensor:
    """``mmd2_unbiased`` applied independently to each leading slice.

    Args:
        x: (T, n, d) samples, n >= 2.
        y: (T, m, d) samples, m >= 2.
        kernel: Mixture-of-RBF bandwidths.

    Returns:
        Tensor of shape (T,).
    """
    kernel = kernel or KernelSpec()
    if x.dim() != 3 or y.dim() != 3 or x.shape[0] != y.shape[0] or x.shape[2] != y.shape[2]:
        raise InvalidArgumentError(f"expected (T, n, d) and (T, m, d), got {tuple(x.shape)} and {tuple(y.shape)}")
    n, m = x.shape[1], y.shape[1]
    if n < 2 or m < 2:
        raise InvalidArgumentError(f"unbiased MMD needs at least 2 samples per set, got n={n}, m={m}")
    scales = torch.tensor([1.0 / (2.0 * s * s) for s in kernel.bandwidths], dtype=x.dtype, device=x.device)

    def gram(a, b):
        d2 = (a.unsqueeze(2) - b.unsqueeze(1)).pow(2).sum(-1)
        return torch.exp(-d2.unsqueeze(-1) * scales).sum(-1)

    kxx, kyy, kxy = gram(x, x), gram(y, y), gram(x, y)
    within_x = (kxx.sum((1, 2)) - kxx.diagonal(dim1=1, dim2=2).sum(-1)) / (n * (n - 1))
    within_y = (kyy.sum((1, 2)) - kyy.diagonal(dim1=1, dim2=2).sum(-1)) / (m * (m - 1))
    return within_x + within_y - 2.0 * kxy.sum((1, 2)) / (n * m)


def _scalar_outputs(f: Callable[[Tensor], Tensor], points: Tensor) -> Tensor:
    out = f(points)
    out = torch.as_tensor(out)
    if out.dim() == 2 and out.shape[1] == 1:
        out = out.squeeze(1)
    if out.dim() == 0:
        out = out.expand(points.shape[0])
    if out.shape != (points.shape[0],):
        raise InvalidArgumentError(f"critic must return one scalar per point, got shape {tuple(out.shape)}")
    return out


def gradient_norm_penalty(
    points: Tensor, f: Callable[[Tensor], Tensor], create_graph: bool = True
) -> Tensor:
    """Mean over ``points`` of ``|grad f(z)|^2``.

    ``f`` must act row-wise (each output depends only on its own input row).
    With ``create_graph`` the result is differentiable w.r.t. the parameters
    of ``f``; the points themselves are treated as constants.
    """
    # enable_grad: the input gradient is part of the value, so it must be
    # computed even when the caller runs under no_grad.
    with torch.enable_grad():
        points = _as_points(points).detach().requires_grad_(True)
        out = _scalar_outputs(f, points)
        if out.requires_grad:
            (grad,) = torch.autograd.grad(out.sum(), points, create_graph=create_graph, allow_unused=True)
        else:
            grad = None
    if grad is None:
        grad = torch.zeros_like(points)
    sq = grad.pow(2).sum(dim=1)
    if not torch.isfinite(sq).all():
        raise NumericError("non-finite critic gradient")
    return sq.mean()


def scaled_mmd_penalty(
    z_post: Tensor,
    z_prior: Tensor,
    feature_map: Callable[[Tensor], Tensor],
    create_graph: bool = True,
) -> Tensor:
    """MMD^2 through a scalar feature map, divided by 1 + 10 E_prior |grad f|^2.

    The kernel on feature values is a unit-bandwidth RBF. Set
    ``create_graph=False`` when the caller does not need gradients w.r.t. the
    feature-map parameters through the denominator (e.g. encoder updates).
    """
    z_post, z_prior = _as_points(z_post), _as_points(z_prior)
    _check_pair(z_post, z_prior)
    f_post = _scalar_outputs(feature_map, z_post)
    f_prior = _scalar_outputs(feature_map, z_prior)
    if not (torch.isfinite(f_post).all() and torch.isfinite(f_prior).all()):
        raise NumericError("non-finite feature-map output")
    numerator = mmd2_unbiased(f_post.unsqueeze(1), f_prior.unsqueeze(1), KernelSpec((1.0,)))
    denominator = 1.0 + SCALED_MMD_GRAD_WEIGHT * gradient_norm_penalty(
        z_prior, feature_map, create_graph=create_graph
    )
    return numerator / denominator


def _log_prob(p: Tensor) -> Tensor:
    return torch.log(p.clamp(PROB_EPS, 1.0 - PROB_EPS))


def gan_regularizer_losses(
    z_prior: Tensor,
    z_post: Tensor,
    discriminator: Callable[[Tensor], Tensor],
    lam: float,
    alpha: Tensor | Sequence[float],
) -> tuple[Tensor, Tensor]:
    """Discriminator and encoder losses for the adversarial content penalty.

    ``disc_loss = -(E_prior log D(z) + E_post log(1 - D(z~))) + lam * E |grad D(z^)|^2``
    with ``z^ = alpha z + (1 - alpha) z~`` paired by index. ``enc_loss`` is the
    non-saturating ``-E_post log D(z~)``.

    Both are returned for minimization. Detach ``z_post`` before stepping the
    discriminator on ``disc_loss``.
    """
    z_prior, z_post = _as_points(z_prior), _as_points(z_post)
    _check_pair(z_prior, z_post)
    if z_prior.shape[0] != z_post.shape[0]:
        raise InvalidArgumentError(
            f"prior and posterior sets must have equal size, got {z_prior.shape[0]} and {z_post.shape[0]}"
        )
    if lam < 0:
        raise InvalidArgumentError(f"gradient-penalty weight must be >= 0, got {lam}")
    alpha = torch.as_tensor(alpha, dtype=z_prior.dtype, device=z_prior.device).reshape(-1, 1)
    if alpha.shape[0] != z_prior.shape[0]:
        raise InvalidArgumentError("need one interpolation weight per pair")

    d_prior = _scalar_outputs(discriminator, z_prior)
    d_post = _scalar_outputs(discriminator, z_post)
    adv = _log_prob(d_prior).mean() + _log_prob(1.0 - d_post).mean()
    disc_loss = -adv
    if lam > 0:
        z_hat = alpha * z_prior.detach() + (1.0 - alpha) * z_post.detach()
        disc_loss = disc_loss + lam * gradient_norm_penalty(z_hat, discriminator)
    enc_loss = -_log_prob(d_post).mean()
    return disc_loss, enc_loss
