"""Pairwise-ranking training loop with Adam, a decaying triangular cyclic
learning rate, early stopping, and hold-one-slide-out cross-validation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from mesograph import autodiff as ad
from mesograph.data import Dataset, dual_label, zscore_apply, zscore_fit
from mesograph.errors import DataError, NumericalError
from mesograph.graph import CellGraph, build_radius_graph
from mesograph.metrics import (
    EvalRecord,
    auroc,
    average_precision,
    operating_point,
    sens_spec_at,
)
from mesograph.model import (
    MesoGraphParams,
    ScoreSet,
    bag_score,
    clone_params,
    forward,
    forward_values,
    init_params,
    iter_params,
    param_grads,
    params_from_entries,
    params_to_entries,
    wrap_params,
)

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

POSITIVE_SUBTYPES = ("B", "S")


@dataclass
class TrainConfig:
    max_epochs: int = 500
    cycle_len_epochs: int = 50
    lr_min: float = 2e-5
    lr_max0: float = 1e-4
    lr_decay: float = 0.8
    batch_bags: int = 16
    patience_epochs: int = 100
    seed: int = 0
    val_fraction: float = 0.25

    def validate(self) -> None:
        if not (0 < self.lr_min <= self.lr_max0):
            raise DataError(
                f"need 0 < lr_min <= lr_max0, got {self.lr_min} and {self.lr_max0}"
            )
        if not (0 < self.val_fraction < 1):
            raise DataError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if self.max_epochs < 1 or self.batch_bags < 2 or self.cycle_len_epochs < 2:
            raise DataError("degenerate training configuration")


def cyclic_lr(epoch: int, config: TrainConfig) -> float:
    """Triangular cycle: linear lr_min -> peak over the first half of the
    cycle, back down over the second half; the peak decays geometrically
    per cycle while lr_min stays fixed."""
    cycle = epoch // config.cycle_len_epochs
    pos = epoch % config.cycle_len_epochs
    peak = config.lr_max0 * config.lr_decay**cycle
    half = config.cycle_len_epochs / 2.0
    frac = pos / half if pos <= half else (config.cycle_len_epochs - pos) / half
    return config.lr_min + (peak - config.lr_min) * frac


def ranking_loss(batch) -> float:
    """Hinge ranking loss of one head over ordered pairs with unequal labels:
    sum of max(0, 1 - (y_i - y_j)(Z_i - Z_j)). Equal-label pairs contribute
    nothing; with no rankable pair the loss is 0."""
    total = 0.0
    for z_i, y_i in batch:
        for z_j, y_j in batch:
            if y_i != y_j:
                total += max(0.0, 1.0 - (y_i - y_j) * (z_i - z_j))
    return total


def count_rankable_pairs(labels) -> int:
    y = np.asarray(labels)
    return int(np.sum(y[:, None] != y[None, :]))


def ranking_loss_values(z_values, labels) -> ad.Value:
    """Tape version of ranking_loss for one head.

    z_values: list of (1,1) bag-score Values on a shared tape.
    Builds the full ordered-pair matrix Z_i - Z_j with two rank-1 matmuls,
    then hinges against the label-difference margin.
    """
    tape = z_values[0].tape
    b = len(z_values)
    zrow = ad.concat_cols(*z_values)            # (1, b)
    zcol = ad.transpose(zrow)
    ones_row = tape.leaf(np.ones((1, b)))
    ones_col = tape.leaf(np.ones((b, 1)))
    zi = ad.matmul(zcol, ones_row)              # row i: Z_i everywhere
    zj = ad.matmul(ones_col, zrow)              # col j: Z_j everywhere
    diff = ad.sub(zi, zj)
    y = np.asarray(labels, dtype=np.float64)
    dy = y[:, None] - y[None, :]
    margin = ad.cadd(ad.cmul(diff, -dy), 1.0)   # 1 - (y_i - y_j)(Z_i - Z_j)
    keep = (dy != 0.0).astype(np.float64)
    return ad.sum_all(ad.cmul(ad.hinge(margin), keep))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0


def init_adam(params: MesoGraphParams) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(arr) for name, arr in iter_params(params)},
        v={name: np.zeros_like(arr) for name, arr in iter_params(params)},
    )


def adam_step(params: MesoGraphParams, grads: dict, state: AdamState, lr: float):
    """In-place bias-corrected Adam update; missing grads count as zero."""
    state.t += 1
    c1 = 1.0 - BETA1**state.t
    c2 = 1.0 - BETA2**state.t
    for name, arr in iter_params(params):
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        else:
            g = g.reshape(arr.shape)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}")
        state.m[name] = BETA1 * state.m[name] + (1.0 - BETA1) * g
        state.v[name] = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        arr -= lr * m_hat / (np.sqrt(v_hat) + EPS)


def _labels_for(graphs):
    out = []
    for g in graphs:
        lab = dual_label(g.bag_ref.subtype)
        out.append((lab.y_s, lab.y_e))
    return out


def _patients(graphs):
    return {g.bag_ref.patient_id for g in graphs}


def batch_loss_values(tape, graphs, tmodel):
    """Forward a batch of graphs and attach both heads' ranking losses.

    Returns (loss Value or None, rankable pair count, forward outputs).
    None means the batch has no rankable pair in either head.
    """
    outs = [forward_values(tape, g, tmodel) for g in graphs]
    labels = _labels_for(graphs)
    y_s = [l[0] for l in labels]
    y_e = [l[1] for l in labels]
    pairs = count_rankable_pairs(y_s) + count_rankable_pairs(y_e)
    if pairs == 0:
        return None, 0, outs
    loss_s = ranking_loss_values([o.Z_s for o in outs], y_s)
    loss_e = ranking_loss_values([o.Z_e for o in outs], y_e)
    return ad.add(loss_s, loss_e), pairs, outs


def _val_loss(graphs, params) -> tuple:
    """Normalized (per rankable pair) ranking loss over a whole bag set."""
    scores = [forward(g, params) for g in graphs]
    labels = _labels_for(graphs)
    batch_s = [(s.Z_s, y[0]) for s, y in zip(scores, labels)]
    batch_e = [(s.Z_e, y[1]) for s, y in zip(scores, labels)]
    pairs = count_rankable_pairs([y[0] for y in labels]) + count_rankable_pairs(
        [y[1] for y in labels]
    )
    if pairs == 0:
        return 0.0, 0
    return (ranking_loss(batch_s) + ranking_loss(batch_e)) / pairs, pairs


@dataclass
class TrainState:
    """Everything needed to continue an interrupted run so that the
    stitched run is bit-identical to an uninterrupted one."""

    epoch: int                   # next epoch to run
    finished: bool               # a stopping rule fired; resuming is a no-op
    params: MesoGraphParams      # live parameters after the last epoch
    adam: AdamState
    best_loss: float
    since_best: int
    best_params: MesoGraphParams
    history: list


def train(train_graphs, val_graphs, config: TrainConfig, state=None) -> TrainState:
    """Optimize the ranking loss over seeded shuffled batches.

    Early stopping watches the validation ranking loss (normalized per
    pair); the returned state's best_params are the early-stopping
    winner and history rows carry epoch, lr, train_loss, val_loss.
    Pass a previous TrainState to continue that run; the shuffle stream
    is replayed to the saved epoch so continuation and straight-through
    runs see identical batches.
    """
    config.validate()
    if not train_graphs or not val_graphs:
        raise DataError("training needs non-empty train and validation bag sets")
    overlap = _patients(train_graphs) & _patients(val_graphs)
    if overlap:
        raise DataError(
            f"train and validation share patients: {sorted(overlap)[:5]}"
        )
    d0 = train_graphs[0].node_features.shape[1]
    if state is None:
        params = init_params(d0, seed=config.seed)
        state = TrainState(
            epoch=0,
            finished=False,
            params=params,
            adam=init_adam(params),
            best_loss=float(np.inf),
            since_best=0,
            best_params=clone_params(params),
            history=[],
        )
    elif state.params.d0 != d0:
        raise DataError(
            f"resume state expects d0={state.params.d0}, data has {d0}"
        )
    if state.finished:
        log.info("training already finished at epoch %d; nothing to resume", state.epoch)
        return state

    params = state.params
    adam = state.adam
    shuffle_rng = np.random.default_rng([config.seed, 1])
    for _ in range(state.epoch):
        shuffle_rng.permutation(len(train_graphs))

    for epoch in range(state.epoch, config.max_epochs):
        lr = cyclic_lr(epoch, config)
        order = shuffle_rng.permutation(len(train_graphs))
        epoch_loss = 0.0
        epoch_pairs = 0
        for lo in range(0, len(order), config.batch_bags):
            batch = [train_graphs[i] for i in order[lo : lo + config.batch_bags]]
            tape = ad.Tape()
            tmodel = wrap_params(tape, params)
            loss, pairs, _ = batch_loss_values(tape, batch, tmodel)
            if loss is None:
                log.warning(
                    "batch of %d bags has no rankable pair in either head; skipped",
                    len(batch),
                )
                continue
            ad.backward(loss)
            adam_step(params, dict(param_grads(tmodel)), adam, lr)
            epoch_loss += float(loss.data[0, 0])
            epoch_pairs += pairs
        state.epoch = epoch + 1
        if epoch_pairs == 0:
            log.warning("epoch %d saw no rankable pairs at all; stopping", epoch)
            state.history.append(
                {"epoch": epoch, "lr": lr, "train_loss": 0.0, "val_loss": 0.0}
            )
            state.finished = True
            break
        val_loss, val_pairs = _val_loss(val_graphs, params)
        state.history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": epoch_loss / epoch_pairs,
                "val_loss": val_loss,
            }
        )
        if val_loss < state.best_loss - 1e-12:
            state.best_loss = val_loss
            state.best_params = clone_params(params)
            state.since_best = 0
        else:
            state.since_best += 1
            if state.since_best >= config.patience_epochs:
                state.finished = True
                break
    return state


TRAIN_STATE_FORMAT = "mesograph-train-state"
TRAIN_STATE_VERSION = 1


def _arrays_to_entries(named: dict) -> dict:
    return {
        name: {"shape": list(a.shape), "values": a.ravel().tolist()}
        for name, a in named.items()
    }


def _arrays_from_entries(entries: dict) -> dict:
    return {
        name: np.array(e["values"], dtype=np.float64).reshape(e["shape"])
        for name, e in entries.items()
    }


def save_train_state(path, state: TrainState) -> None:
    """JSON continuation file; every float survives bitwise."""
    doc = {
        "format": TRAIN_STATE_FORMAT,
        "version": TRAIN_STATE_VERSION,
        "epoch": state.epoch,
        "finished": state.finished,
        "d0": state.params.d0,
        "n_layers": len(state.params.layer_mlps),
        "best_loss": None if np.isinf(state.best_loss) else state.best_loss,
        "since_best": state.since_best,
        "adam_t": state.adam.t,
        "params": params_to_entries(state.params),
        "best_params": params_to_entries(state.best_params),
        "adam_m": _arrays_to_entries(state.adam.m),
        "adam_v": _arrays_to_entries(state.adam.v),
        "history": state.history,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_train_state(path) -> TrainState:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"unreadable train state {path}: {e}") from None
    if doc.get("format") != TRAIN_STATE_FORMAT:
        raise DataError(f"{path} is not a training continuation file")
    if doc.get("version") != TRAIN_STATE_VERSION:
        raise DataError(f"unsupported train state version {doc.get('version')}")
    d0, n_layers = doc["d0"], doc["n_layers"]
    return TrainState(
        epoch=int(doc["epoch"]),
        finished=bool(doc["finished"]),
        params=params_from_entries(doc["params"], d0, n_layers),
        adam=AdamState(
            m=_arrays_from_entries(doc["adam_m"]),
            v=_arrays_from_entries(doc["adam_v"]),
            t=int(doc["adam_t"]),
        ),
        best_loss=float(np.inf) if doc["best_loss"] is None else float(doc["best_loss"]),
        since_best=int(doc["since_best"]),
        best_params=params_from_entries(doc["best_params"], d0, n_layers),
        history=doc["history"],
    )


@dataclass
class FoldResult:
    slide_id: str
    skipped: bool = False
    reason: str = ""
    auroc: float = float("nan")
    average_precision: float = float("nan")
    threshold: float = float("nan")
    sensitivity: float = float("nan")
    specificity: float = float("nan")
    bag_scores: list = field(default_factory=list)  # (BagMeta, Z) on test bags
    score_sets: dict = field(default_factory=dict)  # bag_id -> ScoreSet
    train_bag_ids: list = field(default_factory=list)
    val_bag_ids: list = field(default_factory=list)
    params: Optional[MesoGraphParams] = None
    norm_stats: Optional[tuple] = None
    history: list = field(default_factory=list)


@dataclass
class CrossValResult:
    folds: list
    mean_auroc: float
    std_auroc: float
    mean_ap: float
    std_ap: float
    mean_sensitivity: float
    mean_specificity: float
    pooled_auroc: float
    pooled_ap: float


def _split_patients(bags, val_fraction, rng):
    """Patient-level split: shuffled patients fill the validation side
    until it holds ~val_fraction of the bags."""
    by_patient = {}
    for bag, cells in bags:
        by_patient.setdefault(bag.patient_id, []).append((bag, cells))
    patients = sorted(by_patient)
    target_val = val_fraction * len(bags)
    for _ in range(30):
        order = rng.permutation(len(patients))
        val, train = [], []
        n_val = 0
        for idx in order:
            group = by_patient[patients[idx]]
            if n_val < target_val:
                val.extend(group)
                n_val += len(group)
            else:
                train.extend(group)
        train_labels = {bag.subtype for bag, _ in train}
        val_labels = {bag.subtype for bag, _ in val}
        if len(train_labels) >= 2 and len(val_labels) >= 2:
            return train, val
    log.warning("could not find a patient split with 2 labels on both sides")
    return train, val


def _graphs_for(bags, radius_um):
    return [build_radius_graph(cells, radius_um, bag) for bag, cells in bags]


def _nan_mean(values) -> float:
    keep = [v for v in values if np.isfinite(v)]
    return float(np.mean(keep)) if keep else float("nan")


def _nan_std(values) -> float:
    keep = [v for v in values if np.isfinite(v)]
    return float(np.std(keep)) if keep else float("nan")


def evaluate_fold(test_records, val_records):
    """Threshold from validation scores, sensitivity/specificity on test."""
    threshold, _, _ = operating_point(val_records)
    sens, spec = sens_spec_at(test_records, threshold)
    return threshold, sens, spec


def cross_validate(
    dataset: Dataset, config: TrainConfig, radius_um: float = 30.0
) -> CrossValResult:
    """One fold per slide: that slide's bags are the test set, the rest is
    split 75/25 train/validation at the patient level. Feature stats are
    fit on each fold's training cells only."""
    slides = []
    for bag, _ in dataset.bags:
        if bag.slide_id not in slides:
            slides.append(bag.slide_id)
    if len(slides) < 2:
        raise DataError(f"cross-validation needs >=2 slides, got {len(slides)}")

    folds = []
    for fold_idx, slide in enumerate(slides):
        test = [(b, c) for b, c in dataset.bags if b.slide_id == slide]
        rest = [(b, c) for b, c in dataset.bags if b.slide_id != slide]
        rest_labels = {b.subtype for b, _ in rest}
        if len(rest_labels) < 2:
            log.warning("fold %s skipped: <2 labels outside the slide", slide)
            folds.append(
                FoldResult(
                    slide_id=slide,
                    skipped=True,
                    reason="fewer than 2 subtype labels outside the test slide",
                )
            )
            continue
        fold_seed = int(np.random.SeedSequence([config.seed, fold_idx]).generate_state(1)[0])
        rng = np.random.default_rng(fold_seed)
        train_bags, val_bags = _split_patients(rest, config.val_fraction, rng)
        stats = zscore_fit(train_bags)

        def norm(bags):
            return zscore_apply(Dataset(bags=bags, d0=dataset.d0), stats).bags

        fold_config = replace(config, seed=fold_seed)
        train_graphs = _graphs_for(norm(train_bags), radius_um)
        val_graphs = _graphs_for(norm(val_bags), radius_um)
        fold_state = train(train_graphs, val_graphs, fold_config)
        params, history = fold_state.best_params, fold_state.history

        test_graphs = _graphs_for(norm(test), radius_um)
        score_sets = {}
        test_records = []
        bag_scores = []
        for g in test_graphs:
            s = forward(g, params)
            score_sets[g.bag_ref.bag_id] = s
            test_records.append(
                EvalRecord(
                    bag_id=g.bag_ref.bag_id,
                    score=s.Z,
                    positive=g.bag_ref.subtype in POSITIVE_SUBTYPES,
                )
            )
            bag_scores.append((g.bag_ref, s.Z))
        val_records = [
            EvalRecord(
                bag_id=g.bag_ref.bag_id,
                score=forward(g, params).Z,
                positive=g.bag_ref.subtype in POSITIVE_SUBTYPES,
            )
            for g in val_graphs
        ]
        fold = FoldResult(
            slide_id=slide,
            bag_scores=bag_scores,
            score_sets=score_sets,
            train_bag_ids=[b.bag_id for b, _ in train_bags],
            val_bag_ids=[b.bag_id for b, _ in val_bags],
            params=params,
            norm_stats=stats,
            history=history,
        )
        try:
            fold.auroc = auroc(test_records)
            fold.average_precision = average_precision(test_records)
            fold.threshold, fold.sensitivity, fold.specificity = evaluate_fold(
                test_records, val_records
            )
        except DataError as e:
            log.warning("fold %s metrics incomplete: %s", slide, e)
        folds.append(fold)

    live = [f for f in folds if not f.skipped]
    if not live:
        raise DataError("every fold was skipped")
    pooled = [
        EvalRecord(
            bag_id=bag.bag_id,
            score=z,
            positive=bag.subtype in POSITIVE_SUBTYPES,
        )
        for f in live
        for bag, z in f.bag_scores
    ]
    try:
        pooled_auroc = auroc(pooled)
        pooled_ap = average_precision(pooled)
    except DataError as e:
        log.warning("pooled metrics incomplete: %s", e)
        pooled_auroc = pooled_ap = float("nan")
    return CrossValResult(
        folds=folds,
        mean_auroc=_nan_mean([f.auroc for f in live]),
        std_auroc=_nan_std([f.auroc for f in live]),
        mean_ap=_nan_mean([f.average_precision for f in live]),
        std_ap=_nan_std([f.average_precision for f in live]),
        mean_sensitivity=_nan_mean([f.sensitivity for f in live]),
        mean_specificity=_nan_mean([f.specificity for f in live]),
        pooled_auroc=pooled_auroc,
        pooled_ap=pooled_ap,
    )
