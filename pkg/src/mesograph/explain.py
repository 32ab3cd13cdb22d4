"""Feature-mask attribution: learn a per-bag soft mask over the d0 input
features that preserves the bag score while being small and confident.

The mask is sigmoid(logits) shared by every cell in the bag. Fidelity is
the squared shift of the bag score under masking; the size penalty drives
unneeded features toward 0 and the entropy penalty pushes mask entries
away from 0.5. Masked features shrink toward 0, which is the training
mean after z-scoring.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericalError
from .model import forward, forward_values, wrap_params
from .training import BETA1, BETA2, EPS

log = logging.getLogger(__name__)

LAMBDA_SIZE = 0.05
LAMBDA_ENT = 0.1
MASK_STEPS = 200
MASK_LR = 0.05


@dataclass
class FeatureImportance:
    bag_id: str
    mask: np.ndarray     # d0 values in (0,1)
    ranking: np.ndarray  # feature indices, most important first


@dataclass
class ImportanceSummary:
    groups: dict   # group label -> (d0, 5) array [q25, q50, q75, lo, hi]
    top10: list    # feature indices by overall mean mask, descending


def learn_feature_mask(
    graph,
    params,
    lambda_size: float = LAMBDA_SIZE,
    lambda_ent: float = LAMBDA_ENT,
    steps: int = MASK_STEPS,
    seed: int = 0,
) -> FeatureImportance:
    """Adam on mask logits with the model frozen.

    The fidelity and size terms run through the tape. The entropy term is
    differentiated analytically in logit space: with M = sigmoid(l),
    dH(M)/dl = -l * M * (1 - M), since H'(M) is the negative logit.
    """
    if lambda_size < 0 or lambda_ent < 0:
        raise DataError("mask penalties must be >= 0")
    if steps < 1:
        raise DataError("steps must be >= 1")
    d0 = graph.node_features.shape[1]
    z0 = forward(graph, params).Z
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, 0.1, size=(1, d0))

    m_state = np.zeros_like(logits)
    v_state = np.zeros_like(logits)
    for step in range(1, steps + 1):
        tape = ad.Tape()
        tmodel = wrap_params(tape, params)
        l_leaf = tape.leaf(logits.copy())
        mask_v = ad.sigmoid(l_leaf)
        x = ad.scale_cols(tape.leaf(graph.node_features), mask_v)
        out = forward_values(tape, graph, tmodel, x=x)
        shift = ad.cadd(ad.sub(out.Z_s, out.Z_e), -z0)
        fidelity = ad.matmul(shift, shift)        # squared scalar
        size = ad.mul_scalar(ad.sum_all(mask_v), lambda_size / d0)
        ad.backward(ad.add(fidelity, size))

        mask = mask_v.data
        entropy = -(
            np.where(mask > 0, mask * np.log(mask), 0.0)
            + np.where(mask < 1, (1 - mask) * np.log1p(-mask), 0.0)
        )
        loss = (
            float(fidelity.data[0, 0])
            + lambda_size * float(mask.mean())
            + lambda_ent * float(entropy.mean())
        )
        if not np.isfinite(loss):
            raise NumericalError(
                f"mask optimization diverged on bag "
                f"{getattr(graph.bag_ref, 'bag_id', '?')} at step {step}"
            )
        grad = l_leaf.grad + (lambda_ent / d0) * (-logits * mask * (1 - mask))

        m_state = BETA1 * m_state + (1 - BETA1) * grad
        v_state = BETA2 * v_state + (1 - BETA2) * grad * grad
        m_hat = m_state / (1 - BETA1**step)
        v_hat = v_state / (1 - BETA2**step)
        logits = logits - MASK_LR * m_hat / (np.sqrt(v_hat) + EPS)

    final = 1.0 / (1.0 + np.exp(-logits[0]))
    return FeatureImportance(
        bag_id=getattr(graph.bag_ref, "bag_id", ""),
        mask=final,
        ranking=np.argsort(-final, kind="stable"),
    )


def mask_fidelity_gap(graph, params, mask) -> float:
    """|Z(X * mask) - Z(X)| for a fixed mask vector."""
    z0 = forward(graph, params).Z
    masked = graph.node_features * np.asarray(mask).reshape(1, -1)
    g = replace(graph, node_features=masked)
    return abs(forward(g, params).Z - z0)


def _box_stats(values: np.ndarray) -> np.ndarray:
    """[q25, q50, q75, lo, hi] with whiskers clipped at box +/- 1.5 IQR."""
    q25, q50, q75 = np.percentile(values, [25, 50, 75])
    iqr = q75 - q25
    lo = max(float(values.min()), q25 - 1.5 * iqr)
    hi = min(float(values.max()), q75 + 1.5 * iqr)
    return np.array([q25, q50, q75, lo, hi])


def aggregate_importance(importances, groups: dict) -> ImportanceSummary:
    """Box-plot style summary per subtype group plus an overall top-10.

    `groups` maps bag_id to its group label; bags missing from the map
    are rejected rather than silently dropped.
    """
    if not importances:
        raise DataError("no importances to aggregate")
    d0 = importances[0].mask.size
    by_group = {}
    for imp in importances:
        if imp.bag_id not in groups:
            raise DataError(f"bag {imp.bag_id!r} has no group label")
        if imp.mask.size != d0:
            raise DataError("importances disagree on feature count")
        by_group.setdefault(groups[imp.bag_id], []).append(imp.mask)
    summary = {}
    for label, masks in by_group.items():
        stack = np.vstack(masks)  # (bags, d0)
        summary[label] = np.vstack(
            [_box_stats(stack[:, j]) for j in range(d0)]
        )
    overall = np.vstack([imp.mask for imp in importances]).mean(axis=0)
    top10 = np.argsort(-overall, kind="stable")[:10].tolist()
    return ImportanceSummary(groups=summary, top10=top10)


def importance_report(summary: ImportanceSummary) -> str:
    lines = ["group\tfeature\tq25\tq50\tq75\twhisker_lo\twhisker_hi"]
    for label in sorted(summary.groups):
        stats = summary.groups[label]
        for j in range(stats.shape[0]):
            row = "\t".join(f"{v:.6g}" for v in stats[j])
            lines.append(f"{label}\tf{j}\t{row}")
    lines.append("top10\t" + ",".join(f"f{j}" for j in summary.top10))
    return "\n".join(lines) + "\n"
