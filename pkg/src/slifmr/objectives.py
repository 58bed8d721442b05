"""Loss terms: inter-modal and intra-modal consistency, BPR and the total objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slifmr import autodiff as ad
from slifmr.errors import ConfigError

INTRA_FORMS = ("literal", "logsumexp")
INTRA_MAPS = ("l2", "identity")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.2
    t_uniform: float = 2.0
    beta: float = 0.5
    gamma: float = 1e-3
    eta: float = 1e-4
    intra_form: str = "literal"
    intra_map: str = "l2"
    cl_enabled: bool = True

    def __post_init__(self):
        if self.tau <= 0 or self.t_uniform <= 0:
            raise ConfigError("temperatures must be positive")
        if min(self.beta, self.gamma, self.eta) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.intra_form not in INTRA_FORMS:
            raise ConfigError(f"intra_form must be one of {INTRA_FORMS}")
        if self.intra_map not in INTRA_MAPS:
            raise ConfigError(f"intra_map must be one of {INTRA_MAPS}")


def _batch(batch_items):
    items = np.unique(np.asarray(batch_items, dtype=np.int64))
    if len(items) < 2:
        raise ValueError("contrastive losses need at least two distinct batch items")
    return items


def info_nce_excluding_positive(anchor, target, tau: float) -> ad.Node:
    """Mean over rows of -log(exp(s_ii/tau) / sum_{j != i} exp(s_ij/tau)),
    s = cosine(anchor, target). ``target`` is used as given (callers detach)."""
    sim = ad.cosine_matrix(anchor, target) * (1.0 / tau)
    n = sim.shape[0]
    off = ~np.eye(n, dtype=bool)
    pos = ad.sum(sim * np.eye(n, dtype=sim.dtype), axis=1)
    return ad.mean(ad.logsumexp(sim, axis=1, mask=off) - pos)


def inter_modal_loss(x_b, x_k, x_m, x_unified, batch_items, cfg: LossConfig) -> ad.Node:
    """Sum of three InfoNCE terms aligning each branch to the stop-gradient unified reps."""
    items = _batch(batch_items)
    target = ad.detach(ad.take(x_unified, items))
    total = None
    for branch in (x_b, x_k, x_m):
        if branch is None:
            continue
        term = info_nce_excluding_positive(ad.take(branch, items), target, cfg.tau)
        total = term if total is None else total + term
    return total


def _intra_single(x, cfg: LossConfig) -> ad.Node:
    f = ad.l2_normalize(x) if cfg.intra_map == "l2" else ad.constant(x)
    b = f.shape[0]
    d2 = ad.pairwise_sq_dist(f)
    if cfg.intra_form == "literal":
        return ad.sum(d2) * (cfg.t_uniform / (b * b))
    flat = ad.reshape(d2, (-1,)) * (-cfg.t_uniform)
    return -(ad.logsumexp(flat, axis=0) - float(np.log(b * b)))


def intra_modal_loss(x_b, x_k, x_m, batch_items, cfg: LossConfig) -> ad.Node:
    items = _batch(batch_items)
    total = None
    for branch in (x_b, x_k, x_m):
        if branch is None:
            continue
        term = _intra_single(ad.take(branch, items), cfg)
        total = term if total is None else total + term
    return total


def bpr_loss(pos_scores, neg_scores) -> ad.Node:
    """mean -log sigmoid(y_ui - y_uj), computed as softplus(y_uj - y_ui)."""
    return ad.mean(ad.softplus(ad.sub(neg_scores, pos_scores)))


def squared_norm(nodes) -> ad.Node:
    total = None
    for n in nodes:
        term = ad.sum(n * n)
        total = term if total is None else total + term
    return total if total is not None else ad.constant(np.float32(0.0))


def total_loss(parts: dict, reg_nodes, cfg: LossConfig) -> ad.Node:
    """bpr + beta * inter + gamma * intra + eta * ||Theta||^2 (missing parts count as 0)."""
    loss = parts["bpr"]
    if cfg.cl_enabled:
        if cfg.beta and parts.get("inter") is not None:
            loss = loss + parts["inter"] * cfg.beta
        if cfg.gamma and parts.get("intra") is not None:
            loss = loss + parts["intra"] * cfg.gamma
    if cfg.eta:
        loss = loss + squared_norm(reg_nodes) * cfg.eta
    return loss
