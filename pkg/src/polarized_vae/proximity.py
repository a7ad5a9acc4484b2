"""Distances and divergences between latent representations, and the
max-margin polarization loss built on top of them.

Cosine distance operates on posterior mean vectors; the four
distributional kinds (Hellinger, KL, generalized JS, MMD) operate on
diagonal-Gaussian posterior pairs.  Everything here runs on the autodiff
tape, so any of these can serve as the training-time proximity function.

Row-wise `*_rows` variants score many pairs at once (matrices of means /
stddevs, one pair per row) and are what the training loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, DimensionError

PROXIMITY_KINDS = ("cosine", "hellinger", "kl", "generalized_js", "mmd")

# Guard added to each norm so cosine stays total and differentiable; two
# exactly-zero vectors then score 0.5.
NORM_EPS = 1e-12


@dataclass
class MarginConfig:
    margin: float = 1.0
    kind: str = "cosine"
    mmd_samples: int = 32

    def __post_init__(self):
        if self.margin <= 0:
            raise ContractError("margin must be positive")
        if self.kind not in PROXIMITY_KINDS:
            raise ContractError(f"unknown proximity kind {self.kind!r}")


def _check_same_dim(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"operands differ in shape: {a.shape} vs {b.shape}")


def cosine_distance(z_i, z_j) -> Tensor:
    """Half of one minus the cosine similarity; in [0, 1] for any inputs."""
    z_i, z_j = as_tensor(z_i), as_tensor(z_j)
    _check_same_dim(z_i, z_j)
    num = ad.tsum(ad.mul(z_i, z_j))
    denom = ad.mul(
        ad.add(ad.l2norm(z_i), NORM_EPS), ad.add(ad.l2norm(z_j), NORM_EPS)
    )
    return ad.mul(ad.sub(1.0, ad.div(num, denom)), 0.5)


def cosine_distance_rows(a, b) -> Tensor:
    """Row-wise cosine distance between matching rows of two matrices."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dim(a, b)
    num = ad.tsum(ad.mul(a, b), axis=1)
    na = ad.add(ad.sqrt(ad.tsum(ad.mul(a, a), axis=1)), NORM_EPS)
    nb = ad.add(ad.sqrt(ad.tsum(ad.mul(b, b), axis=1)), NORM_EPS)
    return ad.mul(ad.sub(1.0, ad.div(num, ad.mul(na, nb))), 0.5)


def gaussian_kl_rows(mu_p, sigma_p, mu_q, sigma_q) -> Tensor:
    """KL(P || Q) between diagonal Gaussians, summed per row."""
    mu_p, sigma_p = as_tensor(mu_p), as_tensor(sigma_p)
    mu_q, sigma_q = as_tensor(mu_q), as_tensor(sigma_q)
    log_ratio = ad.sub(ad.log(sigma_q), ad.log(sigma_p))
    var_q2 = ad.mul(ad.mul(sigma_q, sigma_q), 2.0)
    diff = ad.sub(mu_p, mu_q)
    num = ad.add(ad.mul(sigma_p, sigma_p), ad.mul(diff, diff))
    per_dim = ad.sub(ad.add(log_ratio, ad.div(num, var_q2)), 0.5)
    axis = 1 if per_dim.data.ndim == 2 else None
    return ad.tsum(per_dim, axis=axis)


def gaussian_kl(p: "GaussianPair", q: "GaussianPair") -> Tensor:
    return gaussian_kl_rows(p.mu, p.sigma, q.mu, q.sigma)


def hellinger_rows(mu_p, sigma_p, mu_q, sigma_q) -> Tensor:
    """Hellinger distance between diagonal Gaussians, per row, in [0, 1]."""
    mu_p, sigma_p = as_tensor(mu_p), as_tensor(sigma_p)
    mu_q, sigma_q = as_tensor(mu_q), as_tensor(sigma_q)
    var_sum = ad.add(ad.mul(sigma_p, sigma_p), ad.mul(sigma_q, sigma_q))
    # per-dimension Bhattacharyya coefficient
    ratio = ad.div(ad.mul(ad.mul(sigma_p, sigma_q), 2.0), var_sum)
    diff = ad.sub(mu_p, mu_q)
    expo = ad.exp(ad.div(ad.mul(ad.mul(diff, diff), -1.0), ad.mul(var_sum, 4.0)))
    log_bc = ad.add(ad.mul(ad.log(ratio), 0.5), ad.log(expo))
    axis = 1 if log_bc.data.ndim == 2 else None
    bc = ad.exp(ad.tsum(log_bc, axis=axis))
    return ad.sqrt(ad.relu(ad.sub(1.0, bc)))


def hellinger(p: "GaussianPair", q: "GaussianPair") -> Tensor:
    return hellinger_rows(p.mu, p.sigma, q.mu, q.sigma)


def _geometric_midpoint(mu_p, sigma_p, mu_q, sigma_q):
    """Gaussian whose density is the normalized geometric mean of p and q.

    In natural parameters: precision is the average of the two precisions,
    precision*mean is the average of the two.
    """
    prec_p = ad.div(1.0, ad.mul(sigma_p, sigma_p))
    prec_q = ad.div(1.0, ad.mul(sigma_q, sigma_q))
    prec_g = ad.mul(ad.add(prec_p, prec_q), 0.5)
    eta_g = ad.mul(ad.add(ad.mul(prec_p, mu_p), ad.mul(prec_q, mu_q)), 0.5)
    var_g = ad.div(1.0, prec_g)
    mu_g = ad.mul(eta_g, var_g)
    return mu_g, ad.sqrt(var_g)


def generalized_js_rows(mu_p, sigma_p, mu_q, sigma_q) -> Tensor:
    """Generalized JS divergence with a geometric-mean midpoint, per row."""
    mu_p, sigma_p = as_tensor(mu_p), as_tensor(sigma_p)
    mu_q, sigma_q = as_tensor(mu_q), as_tensor(sigma_q)
    mu_g, sigma_g = _geometric_midpoint(mu_p, sigma_p, mu_q, sigma_q)
    kl_p = gaussian_kl_rows(mu_p, sigma_p, mu_g, sigma_g)
    kl_q = gaussian_kl_rows(mu_q, sigma_q, mu_g, sigma_g)
    return ad.mul(ad.add(kl_p, kl_q), 0.5)


def generalized_js(p: "GaussianPair", q: "GaussianPair") -> Tensor:
    return generalized_js_rows(p.mu, p.sigma, q.mu, q.sigma)


def geometric_midpoint_params(
    mu_p: np.ndarray, sigma_p: np.ndarray, mu_q: np.ndarray, sigma_q: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Plain-array midpoint parameters, for inspection and tests."""
    mu_g, sigma_g = _geometric_midpoint(
        as_tensor(mu_p), as_tensor(sigma_p), as_tensor(mu_q), as_tensor(sigma_q)
    )
    return mu_g.data.copy(), sigma_g.data.copy()


def _pairwise_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    """Squared Euclidean distances between all rows of x and rows of y."""
    xx = ad.tsum(ad.mul(x, x), axis=1, keepdims=True)  # [n x 1]
    yy = ad._reshape_row(ad.tsum(ad.mul(y, y), axis=1))  # [1 x m]
    xy = ad.matmul(x, ad.transpose(y))
    d2 = ad.add(ad.sub(xx, ad.mul(xy, 2.0)), yy)
    return ad.relu(d2)  # clamp away tiny negative rounding


def mmd(p: "GaussianPair", q: "GaussianPair", n: int, rng: np.random.Generator) -> Tensor:
    """Unbiased squared MMD with an RBF kernel over reparameterized samples.

    Bandwidth follows the median heuristic (median pairwise squared
    distance of the pooled sample) and is treated as a constant, so
    gradients flow only through the samples.
    """
    if n < 2:
        raise ContractError("mmd needs at least 2 samples per side")
    mu_p, sigma_p = as_tensor(p.mu), as_tensor(p.sigma)
    mu_q, sigma_q = as_tensor(q.mu), as_tensor(q.sigma)
    d = mu_p.data.reshape(-1).shape[0]
    eps_p = rng.standard_normal((n, d))
    eps_q = rng.standard_normal((n, d))
    x = ad.add(ad.mul(Tensor(eps_p), sigma_p), mu_p)
    y = ad.add(ad.mul(Tensor(eps_q), sigma_q), mu_q)

    dxx = _pairwise_sq_dists(x, x)
    dyy = _pairwise_sq_dists(y, y)
    dxy = _pairwise_sq_dists(x, y)

    pooled = np.concatenate(
        [dxx.data[np.triu_indices(n, 1)], dyy.data[np.triu_indices(n, 1)], dxy.data.reshape(-1)]
    )
    bandwidth = float(np.median(pooled))
    if bandwidth <= 0:
        bandwidth = 1.0

    def rbf(d2: Tensor) -> Tensor:
        return ad.exp(ad.mul(d2, -1.0 / bandwidth))

    off = 1.0 - np.eye(n)
    kxx = ad.tsum(ad.mul(rbf(dxx), Tensor(off)))
    kyy = ad.tsum(ad.mul(rbf(dyy), Tensor(off)))
    kxy = ad.tsum(rbf(dxy))
    scale = 1.0 / (n * (n - 1))
    return ad.sub(ad.mul(ad.add(kxx, kyy), scale), ad.mul(kxy, 2.0 / (n * n)))


@dataclass
class GaussianPair:
    """Mean/stddev arrays or Tensors for one diagonal Gaussian."""

    mu: Tensor | np.ndarray
    sigma: Tensor | np.ndarray


def margin_loss(d_pos, d_negs: Sequence, margin: float = 1.0) -> Tensor:
    """Hinge on (margin + d_pos - mean of negative distances).

    Zero when the positive undercuts the average negative by at least the
    margin; subgradient 0 exactly at the kink.
    """
    if len(d_negs) < 1:
        raise ContractError("margin_loss requires at least one negative distance")
    neg_mean = ad.mul(
        ad.tsum(ad.concat([ad._reshape_row(as_tensor(dn)) for dn in d_negs], axis=1)),
        1.0 / len(d_negs),
    )
    arg = ad.add(ad.sub(as_tensor(d_pos), neg_mean), margin)
    return ad.relu(arg)


def margin_loss_rows(d_pos: Tensor, d_neg_matrix: Tensor, margin: float = 1.0) -> Tensor:
    """Batched hinge: d_pos [K], negatives [K x m]; returns the mean loss."""
    if d_neg_matrix.data.ndim != 2 or d_neg_matrix.shape[0] != d_pos.shape[0]:
        raise DimensionError(
            f"negatives shape {d_neg_matrix.shape} does not match positives {d_pos.shape}"
        )
    neg_mean = ad.tmean(d_neg_matrix, axis=1)
    arg = ad.add(ad.sub(d_pos, neg_mean), margin)
    return ad.tmean(ad.relu(arg))


def total_loss(l_rec, l_kl, kl_weight: float, margin_losses, lambdas) -> Tensor:
    """Reconstruction + weighted KL + weighted per-criterion margin terms."""
    if kl_weight < 0 or any(l < 0 for l in lambdas):
        raise ContractError("loss weights must be nonnegative")
    if len(margin_losses) != len(lambdas):
        raise DimensionError("one weight per margin term required")
    out = ad.add(as_tensor(l_rec), ad.mul(as_tensor(l_kl), kl_weight))
    for lc, lam in zip(margin_losses, lambdas):
        out = ad.add(out, ad.mul(as_tensor(lc), float(lam)))
    return out
