"""Non-IID node partitioning, local adaptation and federated averaging.

Each node owns a private model clone and RNG stream, so node training is
reproducible whether nodes run sequentially or on a thread pool. Aggregation
sums contributions in a canonical order that does not depend on node order.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adapters import AdapterVector, LayoutError, attach_film, attach_lora, count_trainable, pack, unpack
from .signal_chain import InterferenceKind, MixtureDataset, OfdmConfig, make_dataset
from .tensor import Adam
from .wavenet import WaveNet, backward_and_step, batch_arrays, evaluate_mse

log = logging.getLogger(__name__)

CS2, CS3, EMI = InterferenceKind.CS2, InterferenceKind.CS3, InterferenceKind.EMI

# Per-node interference composition at full scale.
COMPOSITIONS = {
    "balanced": {
        1: [(CS2, 3000)],
        2: [(CS3, 3000)],
        3: [(CS2, 2000), (EMI, 1000)],
        4: [(CS3, 2000), (EMI, 1000)],
        5: [(EMI, 3000)],
    },
    "imbalanced": {
        1: [(CS2, 3000)],
        2: [(CS3, 3000)],
        3: [(CS2, 2000), (EMI, 200)],
        4: [(CS3, 2000), (EMI, 200)],
        5: [(EMI, 200)],
    },
}

DEFAULT_LR = {"lora": 1e-3, "film": 1e-3, "full": 1e-4}


@dataclass(frozen=True)
class NodeProfile:
    node_id: int
    composition: tuple  # ((InterferenceKind, count), ...)
    regime: str

    @property
    def total(self) -> int:
        return sum(c for _, c in self.composition)

    def count(self, kind) -> int:
        kind = InterferenceKind(kind)
        return sum(c for k, c in self.composition if k is kind)


@dataclass(eq=False)
class NodeData:
    profile: NodeProfile
    train: MixtureDataset
    val: MixtureDataset

    @property
    def node_id(self) -> int:
        return self.profile.node_id


def node_profiles(regime: str, scale: float = 1.0) -> list[NodeProfile]:
    """Node compositions, every count multiplied by ``scale`` (rounded, min 1)."""
    if regime not in COMPOSITIONS:
        raise ValueError(f"unknown regime {regime!r}; expected balanced or imbalanced")
    out = []
    for node_id, comp in COMPOSITIONS[regime].items():
        scaled = tuple((k, max(1, int(round(c * scale)))) for k, c in comp)
        out.append(NodeProfile(node_id, scaled, regime))
    return out


def partition(
    regime: str,
    seed: int,
    scale: float = 1.0,
    cfg: OfdmConfig = OfdmConfig(),
    val_fraction: float = 0.1,
) -> list[NodeData]:
    """Per-node datasets with a train/validation split (90/10 by default)."""
    nodes = []
    for prof in node_profiles(regime, scale):
        rng = np.random.default_rng([seed, prof.node_id, 0])
        full = make_dataset(list(prof.composition), prof.total, "uniform", rng, cfg)
        n_val = int(round(val_fraction * prof.total))
        if prof.total >= 2:
            n_val = min(max(n_val, 1), prof.total - 1)
        else:
            n_val = 0
        n_train = prof.total - n_val
        nodes.append(NodeData(prof, full.subset(range(n_train)), full.subset(range(n_train, prof.total))))
    return nodes


# ---------------------------------------------------------------- aggregation


def fedavg(vectors: Sequence[AdapterVector], weights: Sequence[float]) -> AdapterVector:
    """Sample-count weighted mean of adapter vectors."""
    if len(vectors) == 0:
        raise ValueError("fedavg needs at least one vector")
    if len(vectors) != len(weights):
        raise ValueError("one weight per vector required")
    ref = vectors[0]
    for v in vectors[1:]:
        if not ref.same_layout(v):
            raise LayoutError("cannot average vectors with different layouts")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("total weight must be positive")
    # canonical order makes the float sum independent of node order
    order = sorted(range(len(vectors)), key=lambda k: (w[k], vectors[k].data.tobytes()))
    acc = np.zeros(ref.data.size, dtype=np.float64)
    for k in order:
        acc += (w[k] / total) * vectors[k].data.astype(np.float64)
    return ref.with_data(acc.astype(np.float32))


@dataclass
class CommLedger:
    rows: list = field(default_factory=list)

    COLUMNS = ("round", "node", "method", "val_mse", "params_up", "params_down")

    def record(self, round_: int, node: int, method: str, val_mse: float, up: int, down: int) -> None:
        self.rows.append(
            {"round": round_, "node": node, "method": method, "val_mse": float(val_mse),
             "params_up": int(up), "params_down": int(down)}
        )

    def total_uploaded(self) -> int:
        return sum(r["params_up"] for r in self.rows)

    def total_downloaded(self) -> int:
        return sum(r["params_down"] for r in self.rows)

    def bytes_uploaded(self) -> int:
        return 4 * self.total_uploaded()

    def per_round_upload(self, round_: int) -> dict[int, int]:
        return {r["node"]: r["params_up"] for r in self.rows if r["round"] == round_}

    def val_history(self) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for r in sorted(self.rows, key=lambda r: (r["node"], r["round"])):
            out.setdefault(r["node"], []).append(r["val_mse"])
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "val_mse": repr(r["val_mse"])})

    @classmethod
    def from_csv(cls, path) -> "CommLedger":
        ledger = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                ledger.record(int(r["round"]), int(r["node"]), r["method"], float(r["val_mse"]),
                              int(r["params_up"]), int(r["params_down"]))
        return ledger


# ---------------------------------------------------------------- local training


@dataclass(frozen=True)
class AdaptConfig:
    """Hyperparameters shared by local and federated adaptation."""

    adapter: str = "lora"  # lora | film | full
    rank: int = 4
    alpha: Optional[float] = None
    lr: Optional[float] = None
    batch_size: int = 8
    seed: int = 0
    # local runs
    epochs: int = 20
    schedule: bool = True
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    min_delta: float = 1e-5
    early_stop_patience: int = 5
    # federated runs
    rounds: int = 10
    local_epochs: int = 2
    parallel: int = 1

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[self.adapter]

    @property
    def method_tag(self) -> str:
        return f"lora_r{self.rank}" if self.adapter == "lora" else self.adapter


def prepare_model(backbone: WaveNet, cfg: AdaptConfig) -> WaveNet:
    """Clone the backbone and set up the trainable subset for ``cfg.adapter``."""
    if backbone.adapter is not None:
        raise ValueError("backbone must not carry an adapter")
    model = backbone.clone()
    init_rng = np.random.default_rng([cfg.seed, 0])
    if cfg.adapter == "lora":
        attach_lora(model, cfg.rank, cfg.alpha, init_rng)
    elif cfg.adapter == "film":
        attach_film(model)
    elif cfg.adapter == "full":
        model.set_trainable(True)
    else:
        raise ValueError(f"unknown adapter {cfg.adapter!r}")
    return model


def node_rng(cfg: AdaptConfig, node_id: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, node_id, 1])


def train_epoch(model: WaveNet, optimizer: Adam, data: MixtureDataset, batch_size: int,
                rng: np.random.Generator) -> float:
    if len(data) == 0:
        raise ValueError("empty training set")
    order = rng.permutation(len(data))
    losses = []
    for start in range(0, len(order), batch_size):
        batch = batch_arrays([data[int(i)] for i in order[start : start + batch_size]])
        losses.append(backward_and_step(model, batch, optimizer))
    return float(np.mean(losses))


@dataclass
class LocalResult:
    model: WaveNet
    val_history: list  # validation MSE, index 0 = before training
    train_history: list
    best_epoch: int
    lr_history: list


def _snapshot(params):
    return [p.values.copy() for p in params]


def _restore(params, snap):
    for p, v in zip(params, snap):
        p.values[...] = v


def run_local(method: str, node: NodeData, backbone: WaveNet, cfg: AdaptConfig = AdaptConfig()) -> LocalResult:
    """Adapt one node on its own data.

    ``method`` is ``backbone`` (no training), ``l_lora``, ``l_film`` or ``full_ft``.
    With ``cfg.schedule`` the LR halves after ``plateau_patience`` epochs without
    improvement, training stops after ``early_stop_patience`` such epochs and the
    best-validation parameters are restored; without it exactly ``cfg.epochs``
    epochs run and the last parameters are kept.
    """
    adapter = {"l_lora": "lora", "l_film": "film", "full_ft": "full"}.get(method)
    if method == "backbone":
        return LocalResult(backbone.clone(), [], [], 0, [])
    if adapter is None:
        raise ValueError(f"unknown local method {method!r}")
    if len(node.train) == 0:
        raise ValueError(f"node {node.node_id} has no training data")
    cfg = AdaptConfig(**{**cfg.__dict__, "adapter": adapter})
    model = prepare_model(backbone, cfg)
    trainable = model.trainable_parameters()
    opt = Adam(trainable, lr=cfg.learning_rate)
    rng = node_rng(cfg, node.node_id)
    has_val = len(node.val) > 0
    val0 = evaluate_mse(model, node.val, cfg.batch_size) if has_val else float("nan")
    val_hist, train_hist, lr_hist = [val0], [], []
    best_val, best_epoch, best = val0, 0, _snapshot(trainable)
    plateau_bad = stop_bad = 0
    for epoch in range(1, cfg.epochs + 1):
        lr_hist.append(opt.lr)
        train_hist.append(train_epoch(model, opt, node.train, cfg.batch_size, rng))
        val = evaluate_mse(model, node.val, cfg.batch_size) if has_val else float("nan")
        val_hist.append(val)
        if not cfg.schedule or not has_val:
            continue
        if val < best_val - cfg.min_delta:
            best_val, best_epoch, best = val, epoch, _snapshot(trainable)
            plateau_bad = stop_bad = 0
        else:
            plateau_bad += 1
            stop_bad += 1
            if plateau_bad >= cfg.plateau_patience:
                opt.lr = opt.lr * cfg.plateau_factor
                plateau_bad = 0
            if stop_bad >= cfg.early_stop_patience:
                log.debug("node %d: early stop at epoch %d", node.node_id, epoch)
                break
    if cfg.schedule and has_val:
        _restore(trainable, best)
    else:
        best_epoch = len(val_hist) - 1
    return LocalResult(model, val_hist, train_hist, best_epoch, lr_hist)


# ---------------------------------------------------------------- federated training


@dataclass
class FederatedResult:
    models: list  # per-node locally adapted WaveNet (personalised)
    local_vectors: list
    global_vector: AdapterVector
    ledger: CommLedger
    val_history: np.ndarray  # (rounds, K)


def run_federated(nodes: Sequence[NodeData], backbone: WaveNet, cfg: AdaptConfig = AdaptConfig()) -> FederatedResult:
    """Federated averaging restricted to the exchanged parameter subset.

    Each round every node loads the global vector, trains ``local_epochs``
    epochs with a fresh Adam, reports validation MSE and uploads its vector;
    the server averages by training-set size.
    """
    if cfg.rounds < 1 or cfg.local_epochs < 1:
        raise ValueError("rounds and local_epochs must be >= 1")
    for node in nodes:
        if len(node.train) == 0:
            raise ValueError(f"node {node.node_id} has no training data")
    template = prepare_model(backbone, cfg)
    method = "full" if cfg.adapter == "full" else None
    global_vec = pack(template, method)
    models = [template.clone() for _ in nodes]
    rngs = [node_rng(cfg, n.node_id) for n in nodes]
    weights = [len(n.train) for n in nodes]
    ledger = CommLedger()
    history = np.zeros((cfg.rounds, len(nodes)))
    tag = cfg.method_tag

    def local_round(k):
        model, node = models[k], nodes[k]
        unpack(global_vec, model)
        opt = Adam(model.trainable_parameters(), lr=cfg.learning_rate)
        for _ in range(cfg.local_epochs):
            train_epoch(model, opt, node.train, cfg.batch_size, rngs[k])
        val = evaluate_mse(model, node.val, cfg.batch_size) if len(node.val) else float("nan")
        return pack(model, method), val

    pool = ThreadPoolExecutor(cfg.parallel) if cfg.parallel > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            if pool is None:
                results = [local_round(k) for k in range(len(nodes))]
            else:
                results = list(pool.map(local_round, range(len(nodes))))
            for k, (vec, val) in enumerate(results):
                ledger.record(t, nodes[k].node_id, tag, val, len(vec), len(global_vec))
                history[t - 1, k] = val
            local_vectors = [vec for vec, _ in results]
            global_vec = fedavg(local_vectors, weights)
            log.info("round %d/%d: mean val mse %.5f", t, cfg.rounds, float(np.nanmean(history[t - 1])))
    finally:
        if pool is not None:
            pool.shutdown()
    return FederatedResult(models, local_vectors, global_vec, ledger, history)


def exchanged_count(backbone: WaveNet, cfg: AdaptConfig) -> int:
    """Parameters one node uploads per round under ``cfg``."""
    return count_trainable(prepare_model(backbone, cfg))
