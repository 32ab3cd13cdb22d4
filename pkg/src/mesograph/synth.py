"""Synthetic TMA-like cores with known per-cell ground truth.

Each bag is a set of spatial cell blobs inside a 1000x1000 um disc.
Feature 0 runs high for E cells and low for S cells; feature 1 is the
mirror image; everything else is standard-normal nuisance. Biphasic
bags flip whole blobs to S so the sarcomatoid regions stay spatially
coherent. On top of that every bag gets one shared feature offset,
mimicking per-core staining variation: bag-level feature means alone
do not give the class away, a scorer has to read cells in context.
Survival times are exponential with the rate scaled up by the true S
fraction, so S-dominant cases die sooner by construction.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import BagMeta, CellRecord, Dataset, SUBTYPE_B, SUBTYPE_E, SUBTYPE_S
from .errors import DataError
from .metrics import EvalRecord, auroc

ARENA_UM = 1000.0  # disc diameter; centers at (500, 500)

BASE_SURVIVAL_DAYS = 1200.0
HAZARD_GAIN = 2.5        # rate multiplier slope in the true S fraction
CENSOR_MEAN_DAYS = 1800.0


@dataclass
class SynthConfig:
    n_bags: int = 200
    n_slides: int = 4
    cells_per_bag: tuple = (300, 800)
    d0: int = 16
    subtype_mix: tuple = (0.6, 0.25, 0.15)  # E, B, S
    biphasic_frac_range: tuple = (0.2, 0.8)
    blob_count: tuple = (3, 8)
    noise_sd: float = 0.45
    blob_sd_um: float = 40.0
    bag_shift_sd: float = 0.6
    seed: int = 7

    def validate(self) -> None:
        if self.n_bags < 1 or self.n_slides < 1:
            raise DataError("need at least one bag and one slide")
        if self.d0 < 4:
            raise DataError(f"d0 must be >= 4, got {self.d0}")
        if abs(sum(self.subtype_mix) - 1.0) > 1e-9 or min(self.subtype_mix) < 0:
            raise DataError(f"subtype_mix must be proportions, got {self.subtype_mix}")
        for name, rng_pair in (
            ("cells_per_bag", self.cells_per_bag),
            ("blob_count", self.blob_count),
            ("biphasic_frac_range", self.biphasic_frac_range),
        ):
            lo, hi = rng_pair
            if not (lo <= hi):
                raise DataError(f"{name} range is empty: {rng_pair}")
        if self.cells_per_bag[0] < 1 or self.blob_count[0] < 1:
            raise DataError("cells_per_bag and blob_count must start at >= 1")
        if not (0.0 <= self.biphasic_frac_range[0] <= self.biphasic_frac_range[1] <= 1.0):
            raise DataError("biphasic_frac_range must sit inside [0, 1]")
        if self.noise_sd <= 0 or self.blob_sd_um <= 0:
            raise DataError("noise_sd and blob_sd_um must be positive")
        if self.bag_shift_sd < 0:
            raise DataError("bag_shift_sd must be >= 0")


def _disc_point(rng) -> np.ndarray:
    """Uniform point in the arena disc by rejection from the square."""
    r = ARENA_UM / 2.0
    while True:
        p = rng.uniform(-r, r, size=2)
        if p @ p <= r * r:
            return p + r


def _blob_labels(rng, blob_of, subtype, frac_range):
    """Per-cell E/S labels. Biphasic bags flip shuffled whole blobs to S
    until the target fraction is reached; the last blob always stays E
    so both phases are present."""
    n = blob_of.size
    if subtype == SUBTYPE_E:
        return np.full(n, SUBTYPE_E, dtype=object)
    if subtype == SUBTYPE_S:
        return np.full(n, SUBTYPE_S, dtype=object)
    labels = np.full(n, SUBTYPE_E, dtype=object)
    target = rng.uniform(*frac_range) * n
    order = rng.permutation(np.unique(blob_of))
    s_count = 0
    for blob in order[:-1]:
        if s_count >= target:
            break
        members = blob_of == blob
        labels[members] = SUBTYPE_S
        s_count += int(members.sum())
    return labels


def _features(rng, labels, d0, noise_sd):
    n = labels.size
    feats = rng.normal(0.0, 1.0, size=(n, d0))
    is_s = labels == SUBTYPE_S
    sign = np.where(is_s, -1.0, 1.0)
    feats[:, 0] = sign + rng.normal(0.0, noise_sd, size=n)
    feats[:, 1] = -sign + rng.normal(0.0, noise_sd, size=n)
    return feats


def true_s_fraction(cells) -> float:
    labels = [c.instance_label for c in cells]
    return sum(1 for l in labels if l == SUBTYPE_S) / len(labels)


def generate(config: SynthConfig) -> Dataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    subtypes = (SUBTYPE_E, SUBTYPE_B, SUBTYPE_S)
    bags = []
    for b in range(config.n_bags):
        bag_id = f"bag{b:04d}"
        subtype = subtypes[rng.choice(3, p=np.asarray(config.subtype_mix))]
        n_cells = int(rng.integers(config.cells_per_bag[0], config.cells_per_bag[1] + 1))
        n_blobs = int(rng.integers(config.blob_count[0], config.blob_count[1] + 1))
        centers = np.array([_disc_point(rng) for _ in range(n_blobs)])
        blob_of = rng.integers(0, n_blobs, size=n_cells)
        coords = centers[blob_of] + rng.normal(0.0, config.blob_sd_um, size=(n_cells, 2))
        labels = _blob_labels(rng, blob_of, subtype, config.biphasic_frac_range)
        feats = _features(rng, labels, config.d0, config.noise_sd)
        if config.bag_shift_sd > 0:
            # one staining-style offset per core, shared by all its cells
            feats += rng.normal(0.0, config.bag_shift_sd, size=(1, config.d0))

        s_frac = float(np.mean(labels == SUBTYPE_S))
        mean_days = BASE_SURVIVAL_DAYS / (1.0 + HAZARD_GAIN * s_frac)
        event_time = rng.exponential(mean_days)
        censor_time = rng.exponential(CENSOR_MEAN_DAYS)
        observed = bool(event_time <= censor_time)
        days = float(min(event_time, censor_time))

        meta = BagMeta(
            bag_id=bag_id,
            slide_id=f"slide{b % config.n_slides}",
            patient_id=bag_id,
            subtype=subtype,
            survival_days=max(days, 1e-3),
            event_observed=observed,
            sex="M" if rng.random() < 0.5 else "F",
            age=float(rng.uniform(45.0, 85.0)),
        )
        cells = [
            CellRecord(
                cell_id=k,
                x_um=float(coords[k, 0]),
                y_um=float(coords[k, 1]),
                features=feats[k],
                instance_label=str(labels[k]),
            )
            for k in range(n_cells)
        ]
        bags.append((meta, cells))
    return Dataset(bags=bags, d0=config.d0)


def instance_auroc(score_set, instance_labels) -> Optional[float]:
    """AUROC of the per-cell combined score (z_s - z_e) against the
    instance label being S. Cells without a label are ignored; a bag
    left with a single class returns None so callers can skip it."""
    z = np.asarray(score_set.z_s) - np.asarray(score_set.z_e)
    if len(instance_labels) != z.size:
        raise DataError(
            f"{z.size} scores vs {len(instance_labels)} instance labels"
        )
    records = [
        EvalRecord(bag_id=str(i), score=float(z[i]), positive=lab == SUBTYPE_S)
        for i, lab in enumerate(instance_labels)
        if lab is not None
    ]
    flags = {r.positive for r in records}
    if len(flags) < 2:
        return None
    return auroc(records)
