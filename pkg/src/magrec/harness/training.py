"""Training loop, evaluation, ablations and representation sweeps."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from magrec.autograd.functional import bce_loss
from magrec.autograd.optim import Adam
from magrec.autograd.tensor import backward
from magrec.dataset import DatasetSplit, InteractionRecord, WindowedSample, generate_synthetic, ingest, prepare, read_split
from magrec.errors import ConfigError, DataError
from magrec.graphbuild import REPRESENTATIONS, UserHistoryGraph, build_all
from magrec.harness.config import RunConfig
from magrec.harness.metrics import MetricsReport
from magrec.model import GraphBatch, MagrecConfig, build_model, collate, load_state, snapshot
from magrec.model import _TowerModel as Model

log = logging.getLogger(__name__)

# (use_rie, use_gie, use_dc) rows of the ablation table
ABLATIONS: tuple[tuple[bool, bool, bool], ...] = (
    (False, True, True),
    (False, True, False),
    (True, False, False),
    (True, True, False),
    (True, False, True),
    (True, True, True),
)


def ablation_label(flags: tuple[bool, bool, bool]) -> str:
    names = [n for n, on in zip(("RIE", "GIE", "DC"), flags) if on]
    return "+".join(names)


@dataclass
class GraphSet:
    """Samples of one split with their prebuilt graphs."""

    samples: list[WindowedSample]
    graphs: list[UserHistoryGraph]
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    def groups(self) -> list[np.ndarray]:
        """Sample indices sharing one (user, graph) pair, in order of first appearance."""
        slots: dict[tuple[int, int], list[int]] = {}
        for i, (s, g) in enumerate(zip(self.samples, self.graphs)):
            slots.setdefault((s.user, id(g)), []).append(i)
        return [np.asarray(v, dtype=np.int64) for v in slots.values()]

    def batch(self, index: Sequence[int], config: MagrecConfig) -> GraphBatch:
        return collate([self.samples[i] for i in index], [self.graphs[i] for i in index], config)


@dataclass
class PreparedData:
    split: DatasetSplit
    representation: str
    train: GraphSet
    validation: GraphSet
    test: GraphSet
    vocab: dict[str, int]

    def part(self, name: str) -> GraphSet:
        return {"train": self.train, "val": self.validation, "validation": self.validation, "test": self.test}[name]


def load_split(run: RunConfig) -> DatasetSplit:
    run.validate()
    if run.data_dir is not None:
        return read_split(run.data_dir)
    if run.log_path is not None:
        return prepare(ingest(run.log_path), run.data_seed)
    return prepare(synthetic_records(run), run.data_seed)


def synthetic_records(run: RunConfig) -> list[InteractionRecord]:
    return generate_synthetic(
        run.data_seed,
        run.synthetic_users,
        run.synthetic_items,
        run.synthetic_domains,
        run.cross_domain_strength,
        events_per_user=(run.events_min, run.events_max),
        n_topics=run.synthetic_topics,
        static_prob=run.synthetic_static,
        noise=run.synthetic_noise,
    )


def vocabulary(split: DatasetSplit) -> dict[str, int]:
    """Embedding table sizes: largest id + 2 (row 0 is reserved)."""
    users, items, domains = [0], [0], [0]
    for part in split.parts().values():
        for s in part:
            users.append(s.user)
            items.append(s.candidate_item)
            domains.append(s.candidate_domain)
            for item, dom in s.history:
                items.append(item)
                domains.append(dom)
    return {"n_users": max(users) + 2, "n_items": max(items) + 2, "n_domains": max(domains) + 2}


def build_data(split: DatasetSplit, representation: str) -> PreparedData:
    parts = {}
    for name, samples in split.parts().items():
        kept, graphs, dropped = build_all(samples, representation)
        if dropped:
            log.info("%s/%s: dropped %d samples without a buildable graph", representation, name, dropped)
        parts[name] = GraphSet(kept, graphs, dropped)
    return PreparedData(split, representation, parts["train"], parts["val"], parts["test"], vocabulary(split))


def model_config(run: RunConfig, data: PreparedData) -> MagrecConfig:
    import dataclasses

    return dataclasses.replace(run.model, **data.vocab)


# -- evaluation ----------------------------------------------------------------

def predict(model: Model, graphs: GraphSet, batch_size: int = 512, workers: int = 1) -> np.ndarray:
    if len(graphs) == 0:
        raise DataError("cannot evaluate an empty split")
    chunks = [np.arange(i, min(i + batch_size, len(graphs))) for i in range(0, len(graphs), batch_size)]

    def run(idx):
        return model.predict(graphs.batch(idx, model.config))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(idx) for idx in chunks]
    return np.concatenate(parts)


def evaluate(model: Model, graphs: GraphSet, batch_size: int = 512, workers: int = 1, seed: int = 0, epoch: int = 0) -> MetricsReport:
    """Eval-mode predictions scored overall and per candidate domain."""
    scores = predict(model, graphs, batch_size, workers)
    labels = np.array([s.label for s in graphs.samples])
    domains = np.array([s.candidate_domain for s in graphs.samples])
    return MetricsReport.from_predictions(scores, labels, domains, seed=seed, epoch=epoch)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    history: list[MetricsReport]
    train_loss: list[float]
    best_epoch: int
    train_history: list[MetricsReport] = field(default_factory=list)

    @property
    def best(self) -> MetricsReport:
        return self.history[self.best_epoch - 1]


def epoch_batches(groups: Sequence[np.ndarray], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle candidate groups, concatenate, and cut into mini-batches.

    Candidates sharing a history stay adjacent so their graph is computed
    once. A trailing single sample joins the previous batch.
    """
    order = rng.permutation(len(groups))
    perm = np.concatenate([groups[i] for i in order]) if len(groups) else np.zeros(0, dtype=np.int64)
    n = len(perm)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train(run: RunConfig, data: PreparedData | None = None, track_train: bool = False,
          on_epoch: Callable[[int, MetricsReport, MetricsReport | None], bool] | None = None) -> TrainResult:
    """Mini-batch Adam with early stopping on validation overall logloss.

    ``patience = 0`` disables early stopping. ``on_epoch(epoch, val, train)``
    may return True to stop after that epoch. The returned model holds the
    parameters of the best validation epoch.
    """
    run.validate()
    if data is None:
        data = build_data(load_split(run), run.representation)
    if len(data.train) < 2:
        raise ConfigError("training needs at least 2 samples in the train split")
    if len(data.validation) == 0:
        raise ConfigError("validation split is empty")
    config = model_config(run, data)
    model = build_model(config, seed=run.seed)
    params = model.parameters()
    opt = Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay, decay_masks=model.decay_masks())
    history: list[MetricsReport] = []
    train_history: list[MetricsReport] = []
    losses: list[float] = []
    best_loss = np.inf
    best_epoch = 0
    best_state = snapshot(model)
    stale = 0
    groups = data.train.groups()
    for epoch in range(1, run.epochs + 1):
        rng = np.random.default_rng([run.seed, epoch])
        total, count = 0.0, 0
        for idx in epoch_batches(groups, config.batch_size, rng):
            batch = data.train.batch(idx, config)
            loss = bce_loss(model.forward(batch, training=True), batch.labels)
            backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / count)
        report = evaluate(model, data.validation, config.batch_size, run.eval_workers, run.seed, epoch)
        history.append(report)
        if track_train:
            train_history.append(evaluate(model, data.train, config.batch_size, run.eval_workers, run.seed, epoch))
        log.info("epoch %d: train loss %.5f, val logloss %.5f, val auc %s", epoch, losses[-1],
                 report.overall.logloss, report.overall.auc)
        if report.overall.logloss < best_loss:
            best_loss = report.overall.logloss
            best_epoch = epoch
            best_state = snapshot(model)
            stale = 0
        else:
            stale += 1
            if run.patience and stale >= run.patience:
                break
        if on_epoch is not None and on_epoch(epoch, report, train_history[-1] if track_train else None):
            break
    load_state(model, best_state)
    return TrainResult(model, history, losses, best_epoch, train_history)


# -- experiment tables ---------------------------------------------------------

@dataclass
class TableRow:
    label: str
    validation: MetricsReport
    test: MetricsReport | None
    result: TrainResult


def _row(label: str, run: RunConfig, data: PreparedData) -> TableRow:
    result = train(run, data)
    test = evaluate(result.model, data.test, run.model.batch_size, run.eval_workers, run.seed, result.best_epoch) if len(data.test) else None
    return TableRow(label, result.best, test, result)


def baseline_row(run: RunConfig, data: PreparedData) -> TableRow:
    """Mean-pooling reference trained on the same data and seed."""
    return _row("meanpool", run.replace(architecture="meanpool"), data)


def ablation_run(run: RunConfig, split: DatasetSplit | None = None, baseline: bool = False) -> list[TableRow]:
    """Train the six RIE/GIE/DC combinations on shared data and seed."""
    split = split if split is not None else load_split(run)
    data = build_data(split, run.representation)
    rows = []
    for flags in ABLATIONS:
        variant = run.replace(use_rie=flags[0], use_gie=flags[1], use_dc=flags[2])
        rows.append(_row(ablation_label(flags), variant, data))
    if baseline:
        rows.append(baseline_row(run, data))
    return rows


def representation_sweep(run: RunConfig, split: DatasetSplit | None = None, baseline: bool = False) -> list[TableRow]:
    """Train once per graph representation on shared data and seed."""
    split = split if split is not None else load_split(run)
    rows = []
    prepared = {rep: build_data(split, rep) for rep in REPRESENTATIONS}
    for rep, data in prepared.items():
        rows.append(_row(rep, run.replace(representation=rep), data))
    if baseline:
        rows.append(baseline_row(run, prepared[run.representation]))
    return rows
