"""Loss components, their weighted total, and the named training variants."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import kernels

COMPONENTS = ("unobs", "obs", "rating", "reg", "theta_reg", "alpha_relu")


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    obs: float = 20.0  # gamma1
    rating: float = 1.0  # gamma2
    reg: float = 1e-6  # gamma3
    theta_reg: float = 0.0  # gamma4
    alpha_relu: float = 0.0  # gamma5
    unobs: float = 1.0  # fixed at 1 except for the ratings-only baseline

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ObjectiveError(f"loss weight {k} must be >= 0, got {v}")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in COMPONENTS)


@dataclass(frozen=True)
class Batch:
    observed: bool
    nodes: np.ndarray
    types: np.ndarray
    labels: np.ndarray
    ratings: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.nodes.shape[0])


def theta_penalty(theta_row: np.ndarray) -> float:
    """Squared L2 norm of the demographic part (the intercept is the last entry)."""
    return float(np.sum(theta_row[:-1] ** 2))


def loss_components(rhat: np.ndarray, alpha: np.ndarray, theta: np.ndarray,
                    a_eff: np.ndarray, th_eff: np.ndarray, X: np.ndarray, batch: Batch,
                    target_type: int | None = None) -> dict[str, float]:
    """The six loss components on one homogeneous batch.

    ``alpha``/``theta`` are the per-type coefficients (Case 1 rows); ``a_eff``/
    ``th_eff`` are what each type uses on node-level rows (own or mean).
    """
    out = dict.fromkeys(COMPONENTS, 0.0)
    if len(batch):
        if batch.observed:
            bce, sq, *_ = kernels.observed_rows(batch.nodes, batch.types, batch.labels,
                                                batch.ratings, rhat, alpha, theta, X)
            out["obs"], out["rating"] = bce, sq
        else:
            bce, reg, *_ = kernels.unobserved_rows(batch.nodes, batch.types, batch.labels,
                                                   rhat, a_eff, th_eff, X)
            out["unobs"], out["reg"] = bce, reg
    if target_type is not None:
        out["theta_reg"] = theta_penalty(theta[target_type])
        out["alpha_relu"] = max(0.0, float(alpha[target_type]))
    for k, v in out.items():
        if not np.isfinite(v):
            raise ObjectiveError(f"loss component {k} is not finite ({v})")
    return out


def total_loss(components: dict[str, float], weights: LossWeights) -> float:
    return float(sum(getattr(weights, c) * components.get(c, 0.0) for c in COMPONENTS))


@dataclass(frozen=True)
class VariantConfig:
    """How a variant weights the loss and which rows may move the reporting head.

    ``head_policy``:
      * ``rated_observed`` - own coefficients only for rated types, learned from
        observed-rating rows; frozen on unobserved batches except for the
        subsampled type, whose gradient is scaled by ``unobs_head_weight``.
      * ``all_rows`` - own coefficients for every type, learned from every row.
      * ``none`` - the head is never used.
    """

    name: str
    weights: LossWeights
    head_policy: str = "rated_observed"
    unobs_head_weight: float = 0.0
    uses_ratings: bool = True

    def with_weights(self, **kw) -> "VariantConfig":
        return replace(self, weights=replace(self.weights, **kw))


VARIANTS = {
    "full": VariantConfig("full", LossWeights(20.0, 1.0, 1e-6, 0.0, 0.0)),
    "reports_only": VariantConfig("reports_only", LossWeights(20.0, 0.0, 1e-6, 0.0, 0.0),
                                  head_policy="all_rows", unobs_head_weight=1.0,
                                  uses_ratings=False),
    "ratings_only": VariantConfig("ratings_only", LossWeights(0.0, 1.0, 1e-6, 0.0, 0.0, unobs=0.0),
                                  head_policy="none"),
    "subsampled_full_synth": VariantConfig("subsampled_full_synth",
                                           LossWeights(20.0, 10.0, 1e-6, 0.0, 0.0)),
    "subsampled_full_real": VariantConfig("subsampled_full_real",
                                          LossWeights(20.0, 10.0, 1e-6, 0.1, 0.1),
                                          unobs_head_weight=0.6),
}


def variant_config(name: str) -> VariantConfig:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ObjectiveError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
