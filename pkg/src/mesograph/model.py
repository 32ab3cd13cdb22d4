"""Dual-branch EdgeConv scoring network over cell graphs.

One forward pass per bag: a purely local MLP embeds each cell, a stack of
EdgeConv layers averages MLP-transformed (self, self-minus-neighbor)
messages over the radius neighborhood, all layer outputs are concatenated
(jumping knowledge), and two conditioned branches squash per-cell scores
into (0,1). Bag scores are plain means over cells; the combined score
Z = Z_s - Z_e places a bag on the epithelioid(-1) to sarcomatoid(+1) axis.

The same tape-recorded computation serves training (gradients) and
inference (data only), so there is exactly one implementation of the
arithmetic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from mesograph import autodiff as ad
from mesograph.errors import DataError, NumericalError
from mesograph.graph import CellGraph

N_LAYERS = 5      # local embed + 4 message-passing layers
LAYER_WIDTH = 10
HIDDEN_WIDTH = 10

CHECKPOINT_FORMAT = "mesograph-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class MLPParams:
    """One-hidden-layer relu MLP. W1: (h, in); b1: (h,); W2: (out, h); b2: (out,)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]


@dataclass
class MesoGraphParams:
    """All trainable weights. layer_mlps[0] is the local embed (in=d0);
    layer_mlps[k>=1] are EdgeConv message MLPs (in = 2 * previous width,
    the concatenated (self, difference) message)."""

    layer_mlps: list
    branch_s: MLPParams
    branch_e: MLPParams
    alpha_s: MLPParams
    beta_s: MLPParams
    alpha_e: MLPParams
    beta_e: MLPParams
    d0: int

    def validate(self) -> None:
        if len(self.layer_mlps) < 2:
            raise DataError(f"need at least 2 layers, got {len(self.layer_mlps)}")
        if self.layer_mlps[0].n_in != self.d0:
            raise DataError(
                f"local embed expects {self.layer_mlps[0].n_in} features, d0={self.d0}"
            )
        prev = self.layer_mlps[0].n_out
        total = prev
        for k, m in enumerate(self.layer_mlps[1:], start=1):
            if m.n_in != 2 * prev:
                raise DataError(
                    f"layer {k} input width {m.n_in} != 2*{prev} "
                    f"(self||difference message)"
                )
            prev = m.n_out
            total += prev
        for name in ("branch_s", "branch_e"):
            b = getattr(self, name)
            if b.n_in != total or b.n_out != 1:
                raise DataError(
                    f"{name} must map {total} -> 1, got {b.n_in} -> {b.n_out}"
                )
        for name in ("alpha_s", "beta_s", "alpha_e", "beta_e"):
            c = getattr(self, name)
            if c.n_in != self.d0 or c.n_out != 1:
                raise DataError(
                    f"{name} must map d0={self.d0} -> 1, got {c.n_in} -> {c.n_out}"
                )

    @property
    def jk_width(self) -> int:
        return sum(m.n_out for m in self.layer_mlps)


@dataclass
class ScoreSet:
    """Per-cell scores plus their bag-level means."""

    z_s: np.ndarray  # (n,), strictly inside (0,1)
    z_e: np.ndarray
    Z_s: float
    Z_e: float
    Z: float  # Z_s - Z_e, inside (-1,1)


_MLP_FIELDS = ("W1", "b1", "W2", "b2")
_HEAD_NAMES = ("branch_s", "branch_e", "alpha_s", "beta_s", "alpha_e", "beta_e")


def init_mlp(rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int) -> MLPParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    lim1 = np.sqrt(6.0 / (n_in + n_hidden))
    lim2 = np.sqrt(6.0 / (n_hidden + n_out))
    return MLPParams(
        W1=rng.uniform(-lim1, lim1, size=(n_hidden, n_in)),
        b1=np.zeros(n_hidden),
        W2=rng.uniform(-lim2, lim2, size=(n_out, n_hidden)),
        b2=np.zeros(n_out),
    )


def init_params(
    d0: int,
    seed: int,
    n_layers: int = N_LAYERS,
    width: int = LAYER_WIDTH,
    hidden: int = HIDDEN_WIDTH,
) -> MesoGraphParams:
    rng = np.random.default_rng(seed)
    layers = [init_mlp(rng, d0, hidden, width)]
    for _ in range(n_layers - 1):
        layers.append(init_mlp(rng, 2 * width, hidden, width))
    jk = width * n_layers
    params = MesoGraphParams(
        layer_mlps=layers,
        branch_s=init_mlp(rng, jk, hidden, 1),
        branch_e=init_mlp(rng, jk, hidden, 1),
        alpha_s=init_mlp(rng, d0, hidden, 1),
        beta_s=init_mlp(rng, d0, hidden, 1),
        alpha_e=init_mlp(rng, d0, hidden, 1),
        beta_e=init_mlp(rng, d0, hidden, 1),
        d0=d0,
    )
    params.validate()
    return params


def iter_params(params: MesoGraphParams):
    """Deterministic (name, array) pairs; arrays are the live instances."""
    out = []
    for k, m in enumerate(params.layer_mlps):
        for f in _MLP_FIELDS:
            out.append((f"layer{k}.{f}", getattr(m, f)))
    for name in _HEAD_NAMES:
        m = getattr(params, name)
        for f in _MLP_FIELDS:
            out.append((f"{name}.{f}", getattr(m, f)))
    return out


def clone_params(params: MesoGraphParams) -> MesoGraphParams:
    def c(m):
        return MLPParams(*(getattr(m, f).copy() for f in _MLP_FIELDS))

    return MesoGraphParams(
        layer_mlps=[c(m) for m in params.layer_mlps],
        **{name: c(getattr(params, name)) for name in _HEAD_NAMES},
        d0=params.d0,
    )


# ---------------------------------------------------------------- tape side


@dataclass
class TapeMLP:
    W1: ad.Value
    b1: ad.Value
    W2: ad.Value
    b2: ad.Value


@dataclass
class TapeModel:
    layer_mlps: list
    branch_s: TapeMLP
    branch_e: TapeMLP
    alpha_s: TapeMLP
    beta_s: TapeMLP
    alpha_e: TapeMLP
    beta_e: TapeMLP


@dataclass
class ForwardOut:
    """Tape handles from one bag's forward pass."""

    x: ad.Value    # (n, d0) input leaf
    z_s: ad.Value  # (n, 1)
    z_e: ad.Value
    Z_s: ad.Value  # (1, 1)
    Z_e: ad.Value


def wrap_params(tape: ad.Tape, params: MesoGraphParams) -> TapeModel:
    def w(m):
        return TapeMLP(*(tape.leaf(getattr(m, f)) for f in _MLP_FIELDS))

    return TapeModel(
        layer_mlps=[w(m) for m in params.layer_mlps],
        **{name: w(getattr(params, name)) for name in _HEAD_NAMES},
    )


def param_grads(tmodel: TapeModel):
    """(name, grad-or-None) in iter_params order, after a backward sweep."""
    out = []
    for k, m in enumerate(tmodel.layer_mlps):
        for f in _MLP_FIELDS:
            out.append((f"layer{k}.{f}", getattr(m, f).grad))
    for name in _HEAD_NAMES:
        m = getattr(tmodel, name)
        for f in _MLP_FIELDS:
            out.append((f"{name}.{f}", getattr(m, f).grad))
    return out


def mlp_apply(x: ad.Value, m: TapeMLP) -> ad.Value:
    h = ad.relu(ad.add_bias(ad.matmul(x, ad.transpose(m.W1)), m.b1))
    return ad.add_bias(ad.matmul(h, ad.transpose(m.W2)), m.b2)


def _branch(H, x_bar, branch: TapeMLP, alpha_mlp: TapeMLP, beta_mlp: TapeMLP):
    t = mlp_apply(H, branch)              # (n, 1)
    alpha = mlp_apply(x_bar, alpha_mlp)   # (1, 1), shared across the bag
    beta = mlp_apply(x_bar, beta_mlp)
    z = ad.sigmoid(ad.add_bias(ad.mul_scalar(t, alpha), beta))
    return z, ad.mean_rows(z)


def forward_values(
    tape: ad.Tape,
    graph: CellGraph,
    tmodel: TapeModel,
    x: Optional[ad.Value] = None,
) -> ForwardOut:
    """Record one bag's forward pass on the tape.

    Pass ``x`` to substitute the input features (the feature-mask
    explainer does); otherwise the graph's node features become a leaf.
    """
    if graph.n == 0:
        raise DataError("cannot score an empty bag")
    if x is None:
        x = tape.leaf(graph.node_features)
    adj = graph.adjacency()
    h = mlp_apply(x, tmodel.layer_mlps[0])
    hs = [h]
    for m in tmodel.layer_mlps[1:]:
        ctr = ad.gather_rows(h, adj)
        nbr = ad.gather_rows_reversed(h, adj)
        msg = ad.concat_cols(ctr, ad.sub(ctr, nbr))
        h = ad.segment_mean_rows(mlp_apply(msg, m), adj)
        hs.append(h)
    H = ad.concat_cols(*hs)
    x_bar = ad.mean_rows(x)
    z_s, Z_s = _branch(H, x_bar, tmodel.branch_s, tmodel.alpha_s, tmodel.beta_s)
    z_e, Z_e = _branch(H, x_bar, tmodel.branch_e, tmodel.alpha_e, tmodel.beta_e)
    return ForwardOut(x=x, z_s=z_s, z_e=z_e, Z_s=Z_s, Z_e=Z_e)


# ------------------------------------------------------------- plain-array
# Thin wrappers that run the tape ops on a throwaway tape and return data;
# these are the composable pieces tests probe individually.


def local_embed(graph: CellGraph, params: MesoGraphParams) -> np.ndarray:
    tape = ad.Tape()
    x = tape.leaf(graph.node_features)
    return mlp_apply(x, _wrap_one(tape, params.layer_mlps[0])).data


def edgeconv_layer(h_prev: np.ndarray, graph: CellGraph, mlp: MLPParams) -> np.ndarray:
    if mlp.n_in != 2 * h_prev.shape[1]:
        raise DataError(
            f"message MLP expects {mlp.n_in} inputs, got width {h_prev.shape[1]}"
        )
    tape = ad.Tape()
    h = tape.leaf(h_prev)
    adj = graph.adjacency()
    ctr = ad.gather_rows(h, adj)
    nbr = ad.gather_rows_reversed(h, adj)
    msg = ad.concat_cols(ctr, ad.sub(ctr, nbr))
    return ad.segment_mean_rows(mlp_apply(msg, _wrap_one(tape, mlp)), adj).data


def jumping_knowledge(layer_outputs) -> np.ndarray:
    rows = {h.shape[0] for h in layer_outputs}
    if len(rows) != 1:
        raise DataError(f"layer outputs disagree on node count: {sorted(rows)}")
    return np.concatenate(list(layer_outputs), axis=1)


def branch_score(
    H: np.ndarray,
    x_bar: np.ndarray,
    branch: MLPParams,
    alpha_mlp: MLPParams,
    beta_mlp: MLPParams,
) -> np.ndarray:
    tape = ad.Tape()
    z, _ = _branch(
        tape.leaf(H),
        tape.leaf(np.asarray(x_bar, dtype=np.float64).reshape(1, -1)),
        _wrap_one(tape, branch),
        _wrap_one(tape, alpha_mlp),
        _wrap_one(tape, beta_mlp),
    )
    return z.data[:, 0]


def bag_score(z_s: np.ndarray, z_e: np.ndarray) -> ScoreSet:
    z_s = np.asarray(z_s, dtype=np.float64).ravel()
    z_e = np.asarray(z_e, dtype=np.float64).ravel()
    if z_s.shape != z_e.shape:
        raise DataError(f"score lengths differ: {z_s.shape} vs {z_e.shape}")
    if z_s.size == 0:
        raise DataError("cannot score an empty bag")
    Z_s = float(z_s.mean())
    Z_e = float(z_e.mean())
    return ScoreSet(z_s=z_s, z_e=z_e, Z_s=Z_s, Z_e=Z_e, Z=Z_s - Z_e)


def forward(graph: CellGraph, params: MesoGraphParams) -> ScoreSet:
    tape = ad.Tape()
    out = forward_values(tape, graph, wrap_params(tape, params))
    return bag_score(out.z_s.data[:, 0], out.z_e.data[:, 0])


def _wrap_one(tape: ad.Tape, m: MLPParams) -> TapeMLP:
    return TapeMLP(*(tape.leaf(getattr(m, f)) for f in _MLP_FIELDS))


# -------------------------------------------------------------- checkpoint


def params_to_entries(params: MesoGraphParams) -> dict:
    """JSON-safe {name: {shape, values}} map; floats keep their bits
    through json (shortest-repr round trip)."""
    entries = {}
    for name, arr in iter_params(params):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"refusing to save non-finite parameter {name}")
        entries[name] = {"shape": list(arr.shape), "values": arr.ravel().tolist()}
    return entries


def params_from_entries(entries: dict, d0: int, n_layers: int) -> MesoGraphParams:
    def arr(name):
        entry = entries[name]
        return np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])

    def mlp(prefix):
        return MLPParams(*(arr(f"{prefix}.{f}") for f in _MLP_FIELDS))

    params = MesoGraphParams(
        layer_mlps=[mlp(f"layer{k}") for k in range(n_layers)],
        **{name: mlp(name) for name in _HEAD_NAMES},
        d0=int(d0),
    )
    params.validate()
    return params


def save_checkpoint(path, params: MesoGraphParams, radius_um: float, norm_stats=None):
    """Versioned JSON checkpoint; floats survive a save/load round trip
    bitwise (shortest-repr serialization)."""
    entries = params_to_entries(params)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d0": params.d0,
        "n_layers": len(params.layer_mlps),
        "radius_um": float(radius_um),
        "norm_mean": None if norm_stats is None else np.asarray(norm_stats[0]).tolist(),
        "norm_std": None if norm_stats is None else np.asarray(norm_stats[1]).tolist(),
        "params": entries,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_checkpoint(path):
    """-> (params, radius_um, norm_stats or None)."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise DataError(f"unreadable checkpoint {path}: {e}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('version')}")
    params = params_from_entries(doc["params"], doc["d0"], doc["n_layers"])
    norm_stats = None
    if doc.get("norm_mean") is not None:
        norm_stats = (
            np.asarray(doc["norm_mean"], dtype=np.float64),
            np.asarray(doc["norm_std"], dtype=np.float64),
        )
    return params, float(doc["radius_um"]), norm_stats
