"""Part-probability encoder: per-part linear projection onto a prototype
dictionary and the autoencoder reconstruction loss.

pi_m = P_m z_m is a literal linear map (no softmax/simplex projection), so
entries may be negative. Matrix norms in the loss are Frobenius norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ldva import tensorcore as tc
from ldva.tensorcore import ShapeError, Tensor


@dataclass
class PrototypeDictionary:
    """Per-part encoder/decoder pair; rows of each decoder are the K
    prototype part-types. Real configs keep K well below the feature width C
    (fat decoder); K=C is tolerated for degenerate identity tests."""

    encoders: list[Tensor]  # P_m, each (K, C)
    decoders: list[Tensor]  # D_m, each (K, C)

    def __post_init__(self):
        if len(self.encoders) != len(self.decoders) or not self.encoders:
            raise ValueError("need one (P_m, D_m) pair per part")
        k, c = self.encoders[0].shape
        if k > c:
            raise ValueError(f"K={k} must not exceed C={c} (fat decoder)")
        for p_m, d_m in zip(self.encoders, self.decoders):
            if p_m.shape != (k, c) or d_m.shape != (k, c):
                raise ValueError("all P_m/D_m must share the (K, C) shape")

    @property
    def num_parts(self) -> int:
        return len(self.encoders)

    @property
    def num_prototypes(self) -> int:
        return self.encoders[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.encoders[0].shape[1]


def init_encoder_params(params: tc.ParamSet, num_parts: int, num_prototypes: int,
                        feature_dim: int, rng: np.random.Generator) -> PrototypeDictionary:
    """Register the dictionary matrices (group encoder_PD), Gaussian entries
    with fan-in scale 1/sqrt(C)."""
    std = 1.0 / math.sqrt(feature_dim)
    encoders, decoders = [], []
    for m in range(num_parts):
        p_m = params.add(f"encoder.P{m}",
                         Tensor(rng.normal(0.0, std, size=(num_prototypes, feature_dim))),
                         "encoder_PD")
        d_m = params.add(f"encoder.D{m}",
                         Tensor(rng.normal(0.0, std, size=(num_prototypes, feature_dim))),
                         "encoder_PD")
        encoders.append(p_m)
        decoders.append(d_m)
    return PrototypeDictionary(encoders=encoders, decoders=decoders)


def dictionary_from_params(params: tc.ParamSet, num_parts: int) -> PrototypeDictionary:
    return PrototypeDictionary(
        encoders=[params[f"encoder.P{m}"] for m in range(num_parts)],
        decoders=[params[f"encoder.D{m}"] for m in range(num_parts)])


def _split_parts(z: Tensor, num_parts: int) -> list[Tensor]:
    """(N, M, C) or (M, C) -> list of M tensors (N, C)."""
    if z.ndim == 2:
        z = z.reshape((1,) + z.shape)
    if z.ndim != 3 or z.shape[1] != num_parts:
        raise ShapeError(f"expected (N, {num_parts}, C) part features, got {z.shape}")
    n, _, c = z.shape
    return [tc.take(z, [m], axis=1).reshape((n, c)) for m in range(num_parts)]


def encode(z: Tensor, dictionary: PrototypeDictionary) -> Tensor:
    """Part features (N, M, C) -> part-probability code pi of shape (N, M, K)."""
    squeeze = z.ndim == 2
    if z.shape[-1] != dictionary.feature_dim:
        raise ShapeError(f"encode: feature dim {z.shape[-1]} != dictionary C "
                         f"{dictionary.feature_dim}")
    parts = _split_parts(z, dictionary.num_parts)
    n = parts[0].shape[0]
    k = dictionary.num_prototypes
    cols = [tc.linear(z_m, p_m).reshape((n, 1, k))
            for z_m, p_m in zip(parts, dictionary.encoders)]
    pi = tc.concat(cols, axis=1)
    return pi.reshape((dictionary.num_parts, k)) if squeeze else pi


def reconstruct(pi: Tensor, dictionary: PrototypeDictionary) -> Tensor:
    """Code (N, M, K) -> reconstruction z_hat_m = D_m^T pi_m of shape (N, M, C)."""
    squeeze = pi.ndim == 2
    if pi.shape[-1] != dictionary.num_prototypes:
        raise ShapeError(f"reconstruct: code dim {pi.shape[-1]} != K "
                         f"{dictionary.num_prototypes}")
    if squeeze:
        pi = pi.reshape((1,) + pi.shape)
    if pi.ndim != 3 or pi.shape[1] != dictionary.num_parts:
        raise ShapeError(f"reconstruct: expected (N, {dictionary.num_parts}, K), "
                         f"got {pi.shape}")
    n, _, k = pi.shape
    c = dictionary.feature_dim
    cols = [tc.matmul(tc.take(pi, [m], axis=1).reshape((n, k)), d_m).reshape((n, 1, c))
            for m, d_m in enumerate(dictionary.decoders)]
    z_hat = tc.concat(cols, axis=1)
    return z_hat.reshape((dictionary.num_parts, c)) if squeeze else z_hat


def loss_prob(z: Tensor, dictionary: PrototypeDictionary, lambda_reg: float) -> Tensor:
    """Autoencoder loss, summed over parts and averaged over the batch:

        mean_n sum_m ||z_m - D_m^T P_m z_m||^2
        + lambda_reg * sum_m (||P_m||_F^2 + ||D_m||_F^2)
    """
    squeeze = z.ndim == 2
    parts = _split_parts(z, dictionary.num_parts)
    residual = None
    for z_m, p_m, d_m in zip(parts, dictionary.encoders, dictionary.decoders):
        z_hat = tc.matmul(tc.linear(z_m, p_m), d_m)
        diff = z_m - z_hat
        term = tc.tsum(tc.mul(diff, diff), axis=1)
        residual = term if residual is None else residual + term
    loss = tc.tsum(residual) if squeeze else tc.tmean(residual)
    if lambda_reg:
        reg = None
        for p_m, d_m in zip(dictionary.encoders, dictionary.decoders):
            term = tc.sq_norm(p_m) + tc.sq_norm(d_m)
            reg = term if reg is None else reg + term
        loss = loss + lambda_reg * reg
    return loss
