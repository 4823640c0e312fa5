"""Experiment protocol: pretraining, the adaptation strategies, BER evaluation, reports.

Run artifacts live under one output directory::

    config.yaml                 resolved configuration
    backbone.flrf, pretrain_loss.csv
    adapt/<regime>/<method>/    method.json, node<k>.flad | node<k>.flrf, ledger.csv
    eval/<regime>/              ber_local.csv, ber_global_by_type.csv, summary.csv
    report.md, tradeoff.csv, convergence.csv
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import adapters, wavenet
from .federation import (
    AdaptConfig,
    CommLedger,
    NodeData,
    partition,
    prepare_model,
    run_federated,
    run_local,
)
from .signal_chain import (
    SINR_LEVELS_DB,
    InterferenceKind,
    OfdmConfig,
    ber,
    from_channels,
    make_dataset,
    make_sweep,
    ofdm_demodulate,
    to_channels,
)
from .tensor import Adam
from .wavenet import WaveNet, WaveNetConfig, backward_and_step, batch_arrays

log = logging.getLogger(__name__)

METHODS = ("backbone", "fedavg", "l_film", "fed_film", "l_lora", "fed_lora", "full_ft")
FEDERATED = {"fedavg": "full", "fed_film": "film", "fed_lora": "lora"}
LOCAL = {"l_film": "film", "l_lora": "lora", "full_ft": "full"}
TRADEOFF_METHODS = ("fed_film", "fed_lora_r2", "fed_lora_r4", "fed_lora_r8", "fedavg")
FULL_SCALE_SAMPLES_PER_NODE = 3000


# ---------------------------------------------------------------- configuration


@dataclass
class ModelSection:
    n_blocks: int = 15
    channels: int = 48
    kernel_size: int = 3
    dilation_cycle: int = 5
    causal: bool = False


@dataclass
class DataSection:
    fft_size: int = 64
    cp_len: int = 16
    active_subcarriers: int = 56
    n_symbols: int = 51
    samples_per_node: int = 200
    regime: str = "balanced"
    val_fraction: float = 0.1


@dataclass
class PretrainSection:
    steps: int = 5000
    n_mixtures: int = 2000
    lr: float = 5e-4
    batch_size: int = 8
    log_every: int = 50


@dataclass
class AdaptSection:
    rank: int = 4
    alpha: Optional[float] = None
    rounds: int = 10
    local_epochs: int = 2
    epochs: int = 20
    lr_adapter: float = 1e-3
    lr_full: float = 1e-4
    batch_size: int = 8
    parallel: int = 1


@dataclass
class EvalSection:
    sinr_levels: list = field(default_factory=lambda: list(SINR_LEVELS_DB))
    frames_per_level: int = 30
    global_frames_per_level: int = 30
    batch_size: int = 8


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    out: str = "runs/desk"

    @property
    def wavenet(self) -> WaveNetConfig:
        return WaveNetConfig(**asdict(self.model))

    @property
    def ofdm(self) -> OfdmConfig:
        d = self.data
        return OfdmConfig(d.fft_size, d.cp_len, d.active_subcarriers, d.n_symbols)

    @property
    def node_scale(self) -> float:
        return self.data.samples_per_node / FULL_SCALE_SAMPLES_PER_NODE

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of the experimental settings; the output location is not part of it."""
        d = self.to_dict()
        d.pop("out", None)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        cfg = cls()
        sections = {f.name for f in fields(cls)}
        for key, value in (d or {}).items():
            if key not in sections:
                raise ValueError(f"unknown config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(value, dict):
                known = {f.name for f in fields(current)}
                bad = set(value) - known
                if bad:
                    raise ValueError(f"unknown keys in [{key}]: {sorted(bad)}")
                setattr(cfg, key, replace(current, **value))
            else:
                setattr(cfg, key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(yaml.safe_load(f))

    def save(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)


def full_scale(cfg: ExperimentConfig) -> ExperimentConfig:
    """Full-scale frame length, data volumes and pretraining budget."""
    return replace(
        cfg,
        model=ModelSection(),
        data=replace(cfg.data, n_symbols=512, samples_per_node=FULL_SCALE_SAMPLES_PER_NODE),
        pretrain=replace(cfg.pretrain, steps=151_200, n_mixtures=56_000),
    )


def sub_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


# stream tags for sub_rng
_PRETRAIN_DATA, _PRETRAIN_INIT, _PRETRAIN_ORDER, _TEST = 101, 102, 103, 104


def adapt_config(cfg: ExperimentConfig, adapter: str, rank: Optional[int] = None) -> AdaptConfig:
    a = cfg.adapt
    return AdaptConfig(
        adapter=adapter,
        rank=a.rank if rank is None else rank,
        alpha=a.alpha,
        lr=a.lr_full if adapter == "full" else a.lr_adapter,
        batch_size=a.batch_size,
        seed=cfg.seed,
        epochs=a.epochs,
        rounds=a.rounds,
        local_epochs=a.local_epochs,
        parallel=a.parallel,
    )


def method_dirname(method: str, rank: Optional[int]) -> str:
    return f"{method}_r{rank}" if method in ("l_lora", "fed_lora") else method


def write_resolved(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")


# ---------------------------------------------------------------- pretraining


def pretrain_dataset(cfg: ExperimentConfig):
    """Equal CS2/CS3 mixtures at uniform SINR; the backbone never sees EMI."""
    return make_dataset(
        [(InterferenceKind.CS2, 1), (InterferenceKind.CS3, 1)],
        cfg.pretrain.n_mixtures, "uniform", sub_rng(cfg.seed, _PRETRAIN_DATA), cfg.ofdm,
    )


def pretrain(cfg: ExperimentConfig, out: Optional[Path] = None) -> tuple[WaveNet, list[float]]:
    """Centralised backbone training on communication interference only."""
    p = cfg.pretrain
    data = pretrain_dataset(cfg)
    model = wavenet.build(cfg.wavenet, sub_rng(cfg.seed, _PRETRAIN_INIT))
    opt = Adam(model.trainable_parameters(), lr=p.lr)
    order_rng = sub_rng(cfg.seed, _PRETRAIN_ORDER)
    losses = []
    order = np.empty(0, dtype=np.int64)
    for step in range(p.steps):
        if order.size < p.batch_size:
            order = np.concatenate([order, order_rng.permutation(len(data))])
        idx, order = order[: p.batch_size], order[p.batch_size :]
        losses.append(backward_and_step(model, batch_arrays([data[int(i)] for i in idx]), opt))
        if p.log_every and (step + 1) % p.log_every == 0:
            log.info("pretrain step %d/%d: mse %.5f", step + 1, p.steps, losses[-1])
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        wavenet.save(model, out / "backbone.flrf")
        with open(out / "pretrain_loss.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "mse"])
            for i, v in enumerate(losses, 1):
                w.writerow([i, repr(v)])
    return model, losses


# ---------------------------------------------------------------- adaptation


@dataclass
class AdaptedMethod:
    """Per-node models for one method plus its federated ledger, if any."""

    method: str
    rank: Optional[int]
    models: list
    ledger: Optional[CommLedger] = None

    @property
    def name(self) -> str:
        return method_dirname(self.method, self.rank)


def adapt(cfg: ExperimentConfig, backbone: WaveNet, method: str, nodes: list[NodeData],
          rank: Optional[int] = None) -> AdaptedMethod:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    rank = cfg.adapt.rank if rank is None else rank
    rank = rank if method in ("l_lora", "fed_lora") else None
    if method == "backbone":
        return AdaptedMethod(method, None, [backbone for _ in nodes])
    if method in FEDERATED:
        res = run_federated(nodes, backbone, adapt_config(cfg, FEDERATED[method], rank))
        return AdaptedMethod(method, rank, res.models, res.ledger)
    acfg = adapt_config(cfg, LOCAL[method], rank)
    models = [run_local(method, node, backbone, acfg).model for node in nodes]
    return AdaptedMethod(method, rank, models)


def save_adapted(result: AdaptedMethod, nodes: list[NodeData], directory: Path, regime: str,
                 cfg: ExperimentConfig) -> Path:
    d = directory / result.name
    d.mkdir(parents=True, exist_ok=True)
    files = []
    if result.method != "backbone":
        for node, model in zip(nodes, result.models):
            if model.adapter is not None:
                name = f"node{node.node_id}.flad"
                adapters.write_vector(adapters.pack(model), d / name)
            else:
                name = f"node{node.node_id}.flrf"
                wavenet.save(model, d / name)
            files.append(name)
    if result.ledger is not None:
        result.ledger.to_csv(d / "ledger.csv")
    meta = {
        "method": result.method, "rank": result.rank, "alpha": cfg.adapt.alpha,
        "regime": regime, "seed": cfg.seed, "nodes": [n.node_id for n in nodes], "files": files,
        "config_hash": cfg.digest(),
    }
    (d / "method.json").write_text(json.dumps(meta, indent=2) + "\n")
    return d


def load_adapted(d: Path, backbone: WaveNet, cfg: ExperimentConfig) -> AdaptedMethod:
    meta = json.loads((d / "method.json").read_text())
    method, rank = meta["method"], meta["rank"]
    models = []
    if method == "backbone":
        models = [backbone for _ in meta["nodes"]]
    for name in meta["files"]:
        path = d / name
        if name.endswith(".flrf"):
            models.append(wavenet.load(path))
            continue
        vec = adapters.read_vector(path, backbone.config.kernel_size)
        expected = {"lora": "lora", "film": "film"}.get(
            FEDERATED.get(method) or LOCAL.get(method))
        if vec.method != expected:
            raise ValueError(f"{path}: {vec.method} vector stored for method {method}")
        model = prepare_model(backbone, adapt_config(cfg, vec.method, vec.rank or None))
        adapters.unpack(vec, model)
        models.append(model)
    ledger = CommLedger.from_csv(d / "ledger.csv") if (d / "ledger.csv").exists() else None
    return AdaptedMethod(method, rank, models, ledger)


# ---------------------------------------------------------------- evaluation


def frame_bers(model: Optional[WaveNet], samples, ofdm: OfdmConfig, batch_size: int = 8) -> np.ndarray:
    """Per-frame BER after separation; ``model=None`` demodulates the raw mixture."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        if model is None:
            est = [s.mixture for s in chunk]
        else:
            x = to_channels(np.stack([s.mixture for s in chunk]))
            est = from_channels(model.forward(x))
        for s, e in zip(chunk, est):
            out.append(ber(s.bits, ofdm_demodulate(e, ofdm)))
    return np.asarray(out)


@dataclass
class TestSets:
    local: dict  # node_id -> {level: dataset}
    global_: dict  # kind -> {level: dataset}


def build_test_sets(cfg: ExperimentConfig, nodes: list[NodeData]) -> TestSets:
    e = cfg.eval
    local = {}
    for node in nodes:
        rng = sub_rng(cfg.seed, _TEST, node.node_id)
        local[node.node_id] = make_sweep(
            list(node.profile.composition), e.frames_per_level, rng, cfg.ofdm, e.sinr_levels)
    per_kind = max(1, e.global_frames_per_level // 3)
    global_ = {
        kind: make_sweep([(kind, 1)], per_kind, sub_rng(cfg.seed, _TEST, 0, j), cfg.ofdm, e.sinr_levels)
        for j, kind in enumerate(InterferenceKind)
    }
    return TestSets(local, global_)


def evaluate(cfg: ExperimentConfig, results: list[AdaptedMethod], nodes: list[NodeData],
             tests: Optional[TestSets] = None, include_passthrough: bool = True):
    """BER rows for every (node, method); returns ``(local_rows, global_rows)``."""
    tests = tests or build_test_sets(cfg, nodes)
    bs = cfg.eval.batch_size
    local_rows, global_rows = [], []
    entries = [("passthrough", [None] * len(nodes))] if include_passthrough else []
    entries += [(r.name, r.models) for r in results]
    for name, models in entries:
        for node, model in zip(nodes, models):
            for level, ds in tests.local[node.node_id].items():
                local_rows.append({"node": node.node_id, "method": name, "sinr_db": level,
                                   "ber": float(frame_bers(model, ds, cfg.ofdm, bs).mean())})
            for kind, sweep in tests.global_.items():
                vals = [frame_bers(model, ds, cfg.ofdm, bs).mean() for ds in sweep.values()]
                global_rows.append({"node": node.node_id, "method": name, "kind": kind.value,
                                    "ber": float(np.mean(vals))})
    return local_rows, global_rows


def summarize(local_rows: list[dict]) -> list[dict]:
    """Average BER over the SINR sweep and improvement vs the backbone row."""
    avg: dict[tuple, list] = {}
    for r in local_rows:
        avg.setdefault((r["node"], r["method"]), []).append(r["ber"])
    table = {k: float(np.mean(v)) for k, v in avg.items()}
    methods = list(dict.fromkeys(m for _, m in table))
    nodes = sorted({n for n, _ in table})
    if "backbone" not in methods:
        raise ValueError("summary needs a backbone row to compute improvements")
    rows = []
    for m in methods:
        for n in nodes:
            b, v = table[(n, "backbone")], table[(n, m)]
            rows.append({"node": n, "method": m, "avg_ber": v, "improvement_pct": improvement(b, v)})
        b = float(np.mean([table[(n, "backbone")] for n in nodes]))
        v = float(np.mean([table[(n, m)] for n in nodes]))
        rows.append({"node": "avg", "method": m, "avg_ber": v, "improvement_pct": improvement(b, v)})
    return rows


def improvement(backbone_ber: float, method_ber: float) -> float:
    if backbone_ber == 0:
        return 0.0
    return 100.0 * (backbone_ber - method_ber) / backbone_ber


def write_rows(path: Path, rows: list[dict], columns: tuple) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- report


def pareto_flags(points: dict[str, tuple[float, float]]) -> dict[str, list[str]]:
    """For each method, the methods that dominate it (fewer-or-equal params, higher-or-equal
    improvement, strictly better in at least one)."""
    out = {}
    for m, (x, y) in points.items():
        out[m] = [o for o, (xo, yo) in points.items()
                  if o != m and xo <= x and yo >= y and (xo < x or yo > y)]
    return out


def build_report(run_dir: Path, regime: str = "balanced") -> str:
    run_dir = Path(run_dir)
    summary_path = run_dir / "eval" / regime / "summary.csv"
    ledgers = {m: run_dir / "adapt" / regime / m / "ledger.csv" for m in TRADEOFF_METHODS}
    missing = [str(p) for p in [summary_path, *ledgers.values()] if not p.exists()]
    if missing:
        raise FileNotFoundError("report inputs missing:\n  " + "\n  ".join(missing))
    cfg_path = run_dir / "config.yaml"
    cfg = ExperimentConfig.load(cfg_path) if cfg_path.exists() else None

    summary = read_rows(summary_path)
    avg_impr = {r["method"]: float(r["improvement_pct"]) for r in summary if r["node"] == "avg"}
    points, histories = {}, {}
    for m, path in ledgers.items():
        ledger = CommLedger.from_csv(path)
        ups = {r["params_up"] for r in ledger.rows}
        if len(ups) != 1:
            raise ValueError(f"{path}: per-node upload size is not constant: {sorted(ups)}")
        if m not in avg_impr:
            raise ValueError(f"{summary_path}: no average row for {m}")
        points[m] = (float(ups.pop()), avg_impr[m])
        histories[m] = ledger.val_history()
    dominated = pareto_flags(points)

    trade_rows = [{"method": m, "params_per_round_per_node": int(points[m][0]),
                   "avg_improvement_pct": points[m][1],
                   "dominated_by": ";".join(dominated[m])} for m in TRADEOFF_METHODS]
    write_rows(run_dir / "tradeoff.csv", trade_rows,
               ("method", "params_per_round_per_node", "avg_improvement_pct", "dominated_by"))
    conv_rows = []
    for m, hist in histories.items():
        for node, vals in hist.items():
            for t, v in enumerate(vals, 1):
                conv_rows.append({"method": m, "node": node, "round": t, "val_mse": v})
    write_rows(run_dir / "convergence.csv", conv_rows, ("method", "node", "round", "val_mse"))

    lines = ["# Federated adaptation report", ""]
    if cfg is not None:
        lines += [f"- seed: {cfg.seed}", f"- config hash: {cfg.digest()}"]
    lines += [f"- regime: {regime}", "", "## Communication vs. improvement", "",
              "| method | params/round/node | avg improvement % | dominated by |",
              "|---|---:|---:|---|"]
    for r in trade_rows:
        lines.append(f"| {r['method']} | {r['params_per_round_per_node']:,} | "
                     f"{r['avg_improvement_pct']:.2f} | {r['dominated_by'] or '-'} |")
    fa, fl = points["fedavg"][0], points["fed_lora_r4"][0]
    lines += ["", f"fedavg / fed_lora(r=4) upload ratio: {fa / fl:.2f}x (~{round(fa / fl)}x)", ""]

    lines += ["## Average BER by node", "", "| node | method | avg BER | improvement % |",
              "|---|---|---:|---:|"]
    for r in summary:
        lines.append(f"| {r['node']} | {r['method']} | {float(r['avg_ber']):.5f} | "
                     f"{float(r['improvement_pct']):.2f} |")

    lines += ["", "## Validation MSE per round", ""]
    for m, hist in histories.items():
        rounds = max(len(v) for v in hist.values())
        lines += [f"### {m}", "", "| node | " + " | ".join(f"r{t}" for t in range(1, rounds + 1)) + " |",
                  "|---" * (rounds + 1) + "|"]
        for node, vals in hist.items():
            lines.append(f"| {node} | " + " | ".join(f"{v:.5f}" for v in vals) + " |")
        lines.append("")

    scarce = run_dir / "eval" / "imbalanced" / "summary.csv"
    if scarce.exists():
        rows = read_rows(scarce)
        impr = {(r["node"], r["method"]): float(r["improvement_pct"]) for r in rows}
        key_f, key_l = ("5", "fed_lora_r4"), ("5", "l_lora_r4")
        if key_f in impr and key_l in impr:
            gap = impr[key_f] - impr[key_l]
            lines += ["## Data scarcity (imbalanced regime)", "",
                      f"node 5 improvement gap fed_lora - l_lora (r=4): {gap:+.2f} pp "
                      f"({'non-negative' if gap >= 0 else 'negative'})", ""]
    text = "\n".join(lines) + "\n"
    (run_dir / "report.md").write_text(text)
    return text


LOCAL_COLUMNS = ("node", "method", "sinr_db", "ber")
GLOBAL_COLUMNS = ("node", "method", "kind", "ber")
SUMMARY_COLUMNS = ("node", "method", "avg_ber", "improvement_pct")


# ---------------------------------------------------------------- commands


def backbone_path(out: Path) -> Path:
    return Path(out) / "backbone.flrf"


def load_backbone(out: Path) -> WaveNet:
    path = backbone_path(out)
    if not path.exists():
        raise FileNotFoundError(f"no backbone checkpoint at {path}; run 'pretrain' first")
    return wavenet.load(path)


def run_adapt(cfg: ExperimentConfig, out: Path, method: str, regime: Optional[str] = None,
              rank: Optional[int] = None, backbone: Optional[WaveNet] = None) -> Path:
    """Adapt every node with ``method`` and persist the artifacts; returns the method dir."""
    out = Path(out)
    regime = regime or cfg.data.regime
    backbone = backbone if backbone is not None else load_backbone(out)
    if backbone.config != cfg.wavenet:
        raise ValueError(f"backbone config {backbone.config} does not match {cfg.wavenet}")
    nodes = partition(regime, cfg.seed, cfg.node_scale, cfg.ofdm, cfg.data.val_fraction)
    result = adapt(cfg, backbone, method, nodes, rank)
    return save_adapted(result, nodes, out / "adapt" / regime, regime, cfg)


def run_eval(cfg: ExperimentConfig, out: Path, regime: Optional[str] = None,
             methods: Optional[list[str]] = None) -> list[dict]:
    """Evaluate every adapted method found under ``adapt/<regime>``; writes the BER CSVs."""
    out = Path(out)
    regime = regime or cfg.data.regime
    backbone = load_backbone(out)
    adapt_dir = out / "adapt" / regime
    dirs = sorted(p for p in adapt_dir.glob("*") if (p / "method.json").exists()) if adapt_dir.exists() else []
    if methods is not None:
        wanted = set(methods)
        dirs = [d for d in dirs if d.name in wanted]
        absent = wanted - {d.name for d in dirs}
        if absent:
            raise FileNotFoundError(f"no artifacts for {sorted(absent)} under {adapt_dir}")
    if not dirs:
        raise FileNotFoundError(f"no adapted methods under {adapt_dir}; run 'adapt' first")
    nodes = partition(regime, cfg.seed, cfg.node_scale, cfg.ofdm, cfg.data.val_fraction)
    results = []
    for d in dirs:
        meta = json.loads((d / "method.json").read_text())
        if meta["regime"] != regime or meta["seed"] != cfg.seed:
            raise ValueError(f"{d}: artifacts are for regime={meta['regime']} seed={meta['seed']}, "
                             f"expected regime={regime} seed={cfg.seed}")
        if meta["nodes"] != [n.node_id for n in nodes]:
            raise ValueError(f"{d}: node list {meta['nodes']} does not match the partition")
        results.append(load_adapted(d, backbone, cfg))
    if not any(r.method == "backbone" for r in results):
        results.insert(0, AdaptedMethod("backbone", None, [backbone for _ in nodes]))
    local_rows, global_rows = evaluate(cfg, results, nodes)
    summary = summarize([r for r in local_rows if r["method"] != "passthrough"])
    ev = out / "eval" / regime
    ev.mkdir(parents=True, exist_ok=True)
    write_rows(ev / "ber_local.csv", local_rows, LOCAL_COLUMNS)
    write_rows(ev / "ber_global_by_type.csv", global_rows, GLOBAL_COLUMNS)
    write_rows(ev / "summary.csv", summary, SUMMARY_COLUMNS)
    return summary
