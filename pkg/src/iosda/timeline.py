"""Drive a domain stream through replay, adaptation, pseudo-labelling and
GAN retraining, one arriving domain at a time.

Domain 1 (labelled) only trains the first GAN.  Each later domain j:

1. is split into a training part and a sequestered evaluation holdout;
2. gets replay sets for domains 1..j-1 from the current GAN;
3. trains a fresh multi-head adapter (one head per past domain) with the
   replays as sources and its own unlabelled training part as target;
4. is pseudo-labelled by that adapter;
5. trains a new GAN on fresh replays plus its pseudo-labelled samples;
6. is dropped, together with the previous GAN.

Holdouts and the fingerprints used by :func:`retention_audit` live in an
:class:`EvaluationVault` that is deliberately not part of :class:`TimelineState`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import mdcgan, meosda
from .datahub import HIDDEN, OPEN, DomainDataset
from .ensemble import ensemble_arrays
from .errors import DataError, EmptyDatasetError, IosdaError
from .evalkit import MetricRecord, os_scores, write_metrics_csv

log = logging.getLogger(__name__)

_SPLIT, _REPLAY, _ADAPT, _GAN, _GAN_REPLAY = range(5)


@dataclass(frozen=True)
class TimelineConfig:
    n_known: int
    threshold: float = 0.95
    replay_per_class: int = 100
    holdout_frac: float = 0.2
    seed: int = 0
    gan: mdcgan.GanConfig = field(default_factory=mdcgan.GanConfig)
    meosda: meosda.MeosdaConfig = field(default_factory=meosda.MeosdaConfig)

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 < self.holdout_frac < 1.0:
            raise ValueError("holdout fraction must lie in (0, 1)")
        if self.replay_per_class < 1:
            raise ValueError("replay_per_class must be >= 1")

    def rng(self, *tags: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, *tags])


@dataclass
class TimelineState:
    tau: int = 0
    gan: mdcgan.MdcganState | None = None
    adapter: meosda.MeosdaState | None = None
    records: list[MetricRecord] = field(default_factory=list)


@dataclass
class EvaluationVault:
    holdouts: dict[int, DomainDataset] = field(default_factory=dict)
    fingerprints: dict[int, set[bytes]] = field(default_factory=dict)

    def remember(self, dataset: DomainDataset) -> None:
        rows = self.fingerprints.setdefault(dataset.domain_id, set())
        rows.update(r.tobytes() for r in np.ascontiguousarray(dataset.features))


@dataclass
class StageInfo:
    timestamp: int
    replay_sizes: dict[int, int]
    pseudo_accepted: int
    pseudo_rejected: int


def split_incoming(dataset: DomainDataset, config: TimelineConfig) -> tuple[DomainDataset, DomainDataset]:
    return dataset.split(config.holdout_frac, config.rng(_SPLIT, dataset.domain_id))


def generate_replay(gan: mdcgan.MdcganState, domain_id: int, per_class: int,
                    rng: np.random.Generator) -> DomainDataset:
    """``per_class`` generated samples for every class the GAN saw in ``domain_id``."""
    classes = gan.class_sets.get(domain_id, ())
    labels = np.repeat(np.array(classes, dtype=np.int64), per_class)
    feats = mdcgan.generate_for(gan, labels, np.full(labels.size, domain_id), rng)
    return DomainDataset(domain_id, feats, labels, labels_visible=True)


class Timeline:
    """Stateful runner; ``state`` is what survives between timestamps."""

    def __init__(self, config: TimelineConfig, out_dir: str | Path | None = None):
        self.config = config
        self.state = TimelineState()
        self.vault = EvaluationVault()
        self.stages: list[StageInfo] = []
        self.out_dir = None if out_dir is None else Path(out_dir)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    def step(self, incoming: DomainDataset) -> TimelineState:
        cfg = self.config
        j = self.state.tau + 1
        if incoming.domain_id != j:
            raise DataError(f"expected domain {j}, got domain {incoming.domain_id}")
        if len(incoming) == 0:
            raise EmptyDatasetError(f"domain {j} is empty")
        self.vault.remember(incoming)
        if j == 1:
            if not incoming.labels_visible or np.any(incoming.labels == HIDDEN):
                raise DataError("the first domain must carry labels")
            if np.any(incoming.labels == OPEN):
                raise DataError("the first domain may only contain known classes")
            gan = mdcgan.train_replay_gan([incoming], cfg.n_known, cfg.gan, cfg.rng(_GAN, j))
            self.state = TimelineState(tau=1, gan=gan, adapter=None, records=[])
            self.stages.append(StageInfo(1, {}, len(incoming), 0))
            self._write_checkpoint()
            return self.state

        train, holdout = split_incoming(incoming, cfg)
        self.vault.holdouts[j] = holdout
        target = train.training_view()
        del train, incoming

        gan = self.state.gan
        rng = cfg.rng(_REPLAY, j)
        replays = [generate_replay(gan, d, cfg.replay_per_class, rng) for d in range(1, j)]
        replays = [r for r in replays if len(r)]
        if len(replays) < j - 1:
            log.warning("timestamp %d: %d past domain(s) have nothing to replay", j, j - 1 - len(replays))
        adapter = meosda.fit(cfg.meosda, replays, target, cfg.n_known, cfg.rng(_ADAPT, j))
        adapter.threshold = cfg.threshold
        pseudo = meosda.pseudo_label(adapter, target, cfg.threshold)
        log.info("timestamp %d: %d heads, pseudo-labelled %d of %d target samples",
                 j, adapter.n_heads, len(pseudo.dataset), len(target))

        rng = cfg.rng(_GAN_REPLAY, j)
        pool = [generate_replay(gan, d, cfg.replay_per_class, rng) for d in range(1, j)]
        pool = [p for p in pool if len(p)]
        if len(pseudo.dataset):
            pool.append(pseudo.dataset)
        new_gan = mdcgan.train_replay_gan(pool, cfg.n_known, cfg.gan, cfg.rng(_GAN, j))
        self.stages.append(StageInfo(j, {r.domain_id: len(r) for r in replays},
                                     len(pseudo.dataset), pseudo.rejected_count))
        del pool, pseudo, target, replays

        self.state = TimelineState(tau=j, gan=new_gan, adapter=adapter, records=self.state.records)
        self.state.records.extend(self.evaluate())
        self._write_checkpoint()
        return self.state

    def evaluate(self) -> list[MetricRecord]:
        """Score the current adapter on every holdout seen so far, domain-blind."""
        state = self.state
        records = []
        pred_rows = []
        for dom in sorted(self.vault.holdouts):
            hold = self.vault.holdouts[dom].evaluation_view()
            probs = meosda.predict_all(state.adapter, hold.features)
            heads, labels, chosen, agree = ensemble_arrays(probs)
            s = os_scores(hold.labels, labels, self.config.n_known)
            if s.missing:
                log.warning("timestamp %d, domain %d: no samples of class(es) %s", state.tau, dom, s.missing)
            records.append(MetricRecord(state.tau, dom, s.os, s.os_star, s.per_class))
            if self.out_dir is not None:
                for i in range(len(hold)):
                    pred_rows.append([i, dom, int(hold.labels[i]), int(labels[i]), int(heads[i]), int(agree[i])]
                                     + [f"{p:.9g}" for p in chosen[i]])
        if self.out_dir is not None:
            k1 = self.config.n_known + 1
            _write_csv(self.out_dir / f"predictions_t{state.tau}.csv",
                       ["sample_idx", "domain", "truth", "predicted", "chosen_head", "agreement_flag"]
                       + [f"p{c}" for c in range(k1)], pred_rows)
            write_embeddings(self.out_dir / f"embeddings_t{state.tau}.csv", state.adapter, self.vault.holdouts)
        return records

    def _write_checkpoint(self) -> None:
        if self.out_dir is None:
            return
        ck = self.out_dir / "checkpoints" / f"t{self.state.tau}"
        mdcgan.save_state(self.state.gan, ck)
        if self.state.adapter is not None:
            meosda.save_state(self.state.adapter, ck)
        write_metrics_csv(self.state.records, self.out_dir / "metrics.csv")

    def run(self, domains: Sequence[DomainDataset]) -> TimelineState:
        if len(domains) < 2:
            raise DataError("a stream needs at least two domains")
        for d in domains:
            self.step(d)
            problems = retention_audit(self.state, self.vault)
            if problems:
                raise IosdaError("raw past-domain samples retained: " + "; ".join(problems[:5]))
        return self.state


def run(config: TimelineConfig, domains: Sequence[DomainDataset],
        out_dir: str | Path | None = None) -> tuple[TimelineState, list[MetricRecord]]:
    tl = Timeline(config, out_dir)
    state = tl.run(domains)
    return state, list(state.records)


def holdouts_for(config: TimelineConfig, domains: Sequence[DomainDataset]) -> dict[int, DomainDataset]:
    """The evaluation holdouts a run with ``config`` carves out of ``domains``."""
    return {d.domain_id: split_incoming(d, config)[1] for d in domains if d.domain_id > 1}


def write_embeddings(path: str | Path, adapter: meosda.MeosdaState,
                     holdouts: dict[int, DomainDataset]) -> None:
    """Extractor outputs of every holdout with domain and true label, for external plotting."""
    rows = []
    for dom in sorted(holdouts):
        hold = holdouts[dom].evaluation_view()
        emb = meosda.extract(adapter, hold.features)
        for i in range(len(hold)):
            rows.append([i, dom, int(hold.labels[i])] + [f"{v:.9g}" for v in emb[i]])
    dim = adapter.extractor_spec.out_dim
    _write_csv(Path(path), ["sample_idx", "domain", "truth"] + [f"e{c}" for c in range(dim)], rows)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------------ audit


def _walk(obj, seen: set[int], path: str):
    if id(obj) in seen:
        return
    seen.add(id(obj))
    yield path, obj
    if isinstance(obj, np.ndarray) or isinstance(obj, (str, bytes, int, float, bool)) or obj is None:
        return
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _walk(v, seen, f"{path}[{k!r}]")
    elif isinstance(obj, (list, tuple, set, frozenset)):
        for i, v in enumerate(obj):
            yield from _walk(v, seen, f"{path}[{i}]")
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from _walk(getattr(obj, f.name), seen, f"{path}.{f.name}")
    elif hasattr(obj, "__dict__"):
        for k, v in vars(obj).items():
            yield from _walk(v, seen, f"{path}.{k}")


def retention_audit(state: TimelineState, vault: EvaluationVault) -> list[str]:
    """Everything reachable from ``state`` that is a raw sample of a seen domain.

    Flags any dataset object of a domain up to ``state.tau`` and any array
    row that is byte-identical to a row of such a domain.  An empty list
    means the state is clean.
    """
    past = {d: fp for d, fp in vault.fingerprints.items() if d <= state.tau}
    widths = {len(next(iter(fp))) // 8 for fp in past.values() if fp}
    problems = []
    for path, obj in _walk(state, set(), "state"):
        if isinstance(obj, DomainDataset) and obj.domain_id <= state.tau:
            problems.append(f"{path}: dataset of domain {obj.domain_id}")
        elif isinstance(obj, np.ndarray) and obj.dtype == np.float64 and obj.ndim >= 1 and obj.shape[-1] in widths:
            rows = np.ascontiguousarray(obj).reshape(-1, obj.shape[-1])
            for r in rows:
                b = r.tobytes()
                hit = next((d for d, fp in past.items() if b in fp), None)
                if hit is not None:
                    problems.append(f"{path}: holds a raw row of domain {hit}")
                    break
    return problems


# ---------------------------------------------------------- joint reference


def joint_reference(config: TimelineConfig, domains: Sequence[DomainDataset]) -> list[MetricRecord]:
    """Upper-bound reference: one adapter trained on every domain's real labels at once.

    Domain 1 is used whole, later domains contribute their training split
    with ground-truth labels (open samples train the open slot); scoring uses
    the same holdouts a :class:`Timeline` would create.
    """
    sources, holdouts = [], {}
    for d in domains:
        if d.domain_id == 1:
            sources.append(d)
            continue
        train, hold = split_incoming(d, config)
        sources.append(DomainDataset(d.domain_id, train.features, train.labels, labels_visible=True))
        holdouts[d.domain_id] = hold
    rng = config.rng(_ADAPT, 0)
    state = meosda.init_state(config.n_known, sources[0].feat_dim, [s.domain_id for s in sources],
                              config.meosda, rng)
    bs = config.meosda.batch_size
    streams = [meosda.batch_stream(len(s), bs, rng) for s in sources]
    steps = -(-max(len(s) for s in sources) // bs)
    for _ in range(config.meosda.epochs):
        for _ in range(steps):
            batch = []
            for s, stream in zip(sources, streams):
                idx = next(stream)
                batch.append((s.features[idx], s.labels[idx]))
            meosda.train_step(state, batch, None)
    tau = domains[-1].domain_id
    out = []
    for dom in sorted(holdouts):
        hold = holdouts[dom]
        _, labels, _, _ = ensemble_arrays(meosda.predict_all(state, hold.features))
        s = os_scores(hold.labels, labels, config.n_known)
        out.append(MetricRecord(tau, dom, s.os, s.os_star, s.per_class))
    return out
