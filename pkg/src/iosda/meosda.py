"""Multi-head open-set domain adaptation.

A shared extractor feeds one (K+1)-way head per source domain; slot K is the
open class.  Each head is trained with cross-entropy on its own (replayed)
source and with a boundary loss on the unlabelled target that pulls the
open-slot probability towards ``t``.  The extractor sees the boundary loss
through a gradient-reversal node, so it pushes target samples away from the
boundary while the heads pull them onto it:

    heads:      minimise  sum_m CE_m + ADV_m
    extractor:  minimise  sum_m CE_m - ADV_m
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import diffcore as dc
from .datahub import HIDDEN, OPEN, DomainDataset, FeatureSample
from .ensemble import ensemble_arrays
from .errors import DataError, EmptyDatasetError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MeosdaConfig:
    extractor_dims: tuple[int, ...] = (1024, 512)
    head_hidden: int = 256
    batch_norm: bool = True
    slope: float = dc.DEFAULT_SLOPE
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    t_boundary: float = 0.5
    grl_lambda: float = 1.0
    adv_weight: float = 1.0


@dataclass
class MeosdaState:
    n_known: int
    config: MeosdaConfig
    extractor_spec: dc.MlpSpec
    head_spec: dc.MlpSpec
    extractor: dc.ParamSet
    heads: list[dc.ParamSet]
    head_domains: list[int]
    extractor_opt: dc.AdamState
    head_opts: list[dc.AdamState]
    threshold: float = 0.95

    @property
    def n_heads(self) -> int:
        return len(self.heads)


def init_state(n_known: int, feat_dim: int, head_domains: Sequence[int], config: MeosdaConfig,
               rng: np.random.Generator) -> MeosdaState:
    if not head_domains:
        raise ValueError("need at least one head")
    bn = config.batch_norm
    ext_spec = dc.MlpSpec((feat_dim, *config.extractor_dims), slope=config.slope,
                          output_activation="leaky_relu", batch_norm=(bn,) * len(config.extractor_dims))
    head_spec = dc.MlpSpec((ext_spec.out_dim, config.head_hidden, n_known + 1), slope=config.slope,
                           batch_norm=(bn, False))
    ext = dc.init_params(ext_spec, rng)
    heads = [dc.init_params(head_spec, rng) for _ in head_domains]
    opt = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    return MeosdaState(n_known, config, ext_spec, head_spec, ext, heads, list(head_domains),
                       dc.adam_init(ext, **opt), [dc.adam_init(h, **opt) for h in heads])


def _check_head(state: MeosdaState, head_index: int) -> None:
    if not 0 <= head_index < state.n_heads:
        raise IndexError(f"head {head_index} out of range for {state.n_heads} heads")


def extract(state: MeosdaState, x: np.ndarray) -> np.ndarray:
    """Extractor output in eval mode; these are the exported embeddings."""
    return dc.forward(state.extractor_spec, state.extractor, x, train=False)[0]


def head_logits(state: MeosdaState, head_index: int, x: np.ndarray) -> np.ndarray:
    _check_head(state, head_index)
    return dc.forward(state.head_spec, state.heads[head_index], extract(state, x), train=False)[0]


def predict_head(state: MeosdaState, head_index: int, x: np.ndarray) -> np.ndarray:
    return dc.softmax_rows(head_logits(state, head_index, x))


def predict_all(state: MeosdaState, x: np.ndarray) -> np.ndarray:
    """Probabilities of every head, shape (heads, samples, K+1)."""
    feats = extract(state, x)
    return np.stack([dc.softmax_rows(dc.forward(state.head_spec, h, feats, train=False)[0])
                     for h in state.heads])


def label_targets(labels: np.ndarray, n_known: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels == HIDDEN):
        raise DataError("cross-entropy needs Known or Open labels, got hidden ones")
    return np.where(labels == OPEN, n_known, labels)


def source_ce_loss(state: MeosdaState, head_index: int, x: np.ndarray, labels: np.ndarray) -> float:
    return dc.nll_loss(head_logits(state, head_index, x), label_targets(labels, state.n_known))[0]


def open_adv_loss(state: MeosdaState, head_index: int, x: np.ndarray) -> float:
    return dc.boundary_loss(head_logits(state, head_index, x), state.config.t_boundary, slot=state.n_known)[0]


@dataclass
class StepReport:
    ce: list[float]
    adv: list[float]


def adaptation_grads(state: MeosdaState, sources: Sequence[tuple[np.ndarray, np.ndarray]],
                     target_x: np.ndarray | None):
    """Losses and gradients of one training step (train-mode forward).

    Head m's gradient is that of ``CE_m + w * ADV_m``; the extractor's is
    that of ``sum_m CE_m - lambda * w * ADV_m``.  Returns
    ``(report, extractor_grads, [head_grads])``.
    """
    cfg = state.config
    if len(sources) != state.n_heads:
        raise ValueError(f"{len(sources)} source batches for {state.n_heads} heads")
    use_target = target_x is not None and len(target_x) > 0 and cfg.adv_weight != 0.0
    blocks = [x for x, _ in sources] + ([target_x] if use_target else [])
    sizes = [b.shape[0] for b in blocks]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    feats, t_ext = dc.forward(state.extractor_spec, state.extractor, np.vstack(blocks), train=True)
    d_feats = np.zeros_like(feats)
    tgt = slice(offsets[-2], offsets[-1]) if use_target else None
    report = StepReport([], [])
    head_grads = []
    for m, (x, labels) in enumerate(sources):
        src = slice(offsets[m], offsets[m + 1])
        n_src = sizes[m]
        rows = np.vstack([feats[src], feats[tgt]]) if use_target else feats[src]
        logits, t_head = dc.forward(state.head_spec, state.heads[m], rows, train=True)
        ce, g_ce = dc.nll_loss(logits[:n_src], label_targets(labels, state.n_known))
        up_ce = np.zeros_like(logits)
        up_ce[:n_src] = g_ce
        grads, gin_ce = dc.backward(t_head, state.heads[m], up_ce)
        d_feats[src] += gin_ce[:n_src]
        if use_target:
            d_feats[tgt] += gin_ce[n_src:]
            adv, g_adv = dc.boundary_loss(logits[n_src:], cfg.t_boundary, slot=state.n_known)
            up_adv = np.zeros_like(logits)
            up_adv[n_src:] = cfg.adv_weight * g_adv
            g_head_adv, gin_adv = dc.backward(t_head, state.heads[m], up_adv)
            dc.add_grads(grads, g_head_adv)
            rev = dc.grad_reverse(gin_adv, cfg.grl_lambda)
            d_feats[src] += rev[:n_src]
            d_feats[tgt] += rev[n_src:]
        else:
            adv = 0.0
        report.ce.append(ce)
        report.adv.append(adv)
        head_grads.append(grads)
    ext_grads, _ = dc.backward(t_ext, state.extractor, d_feats)
    return report, ext_grads, head_grads


def train_step(state: MeosdaState, sources: Sequence[tuple[np.ndarray, np.ndarray]],
               target_x: np.ndarray | None) -> StepReport:
    """One Adam step for the extractor and for every head."""
    report, ext_grads, head_grads = adaptation_grads(state, sources, target_x)
    if not np.all(np.isfinite(report.ce + report.adv)):
        raise NumericError(f"non-finite adaptation losses ce={report.ce} adv={report.adv}")
    dc.adam_step(state.extractor, ext_grads, state.extractor_opt)
    for params, grads, opt in zip(state.heads, head_grads, state.head_opts):
        dc.adam_step(params, grads, opt)
    return report


def batch_stream(n: int, bs: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of full index batches, reshuffled after each pass.

    The remainder of each pass is dropped so batch-norm never sees a tiny batch.
    """
    size = min(bs, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield perm[start:start + size]


def fit(config: MeosdaConfig, sources: Sequence[DomainDataset], target: DomainDataset, n_known: int,
        rng: np.random.Generator, epochs: int | None = None) -> MeosdaState:
    """Fresh extractor plus one head per source, trained against ``target``.

    An epoch is enough steps for the largest of the source and target sets
    to be seen once at the configured batch size.
    """
    if not sources:
        raise EmptyDatasetError("adaptation needs at least one source")
    if any(len(s) == 0 for s in sources) or len(target) == 0:
        raise EmptyDatasetError("source and target sets must be non-empty")
    if np.any(target.labels != HIDDEN) and not target.labels_visible:
        raise DataError("target passed with readable labels; use its training view")
    epochs = config.epochs if epochs is None else epochs
    state = init_state(n_known, target.feat_dim, [s.domain_id for s in sources], config, rng)
    bs = config.batch_size
    streams = [batch_stream(len(s), bs, rng) for s in sources]
    tstream = batch_stream(len(target), bs, rng)
    largest = max([len(target)] + [len(s) for s in sources])
    steps = -(-largest // bs)
    for epoch in range(epochs):
        for _ in range(steps):
            batch = []
            for s, stream in zip(sources, streams):
                idx = next(stream)
                batch.append((s.features[idx], s.labels[idx]))
            report = train_step(state, batch, target.features[next(tstream)])
        log.debug("meosda epoch %d: ce=%s adv=%s", epoch + 1,
                  ["%.4f" % v for v in report.ce], ["%.4f" % v for v in report.adv])
    return state


# ----------------------------------------------------------- pseudo-labels


@dataclass
class PseudoLabeledSet:
    dataset: DomainDataset
    confidence: np.ndarray
    rejected_count: int

    @property
    def accepted(self) -> Iterator[tuple[FeatureSample, int, float]]:
        for sample, conf in zip(self.dataset, self.confidence):
            yield sample, sample.truth, float(conf)


def threshold_accept(probs: np.ndarray, th: float, n_known: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Accept rows whose top probability reaches ``th``.

    Returns (accept mask, argmax label codes, top probabilities).
    """
    if not 0.0 < th < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {th}")
    probs = np.atleast_2d(probs)
    idx = np.argmax(probs, axis=1)
    conf = probs[np.arange(probs.shape[0]), idx]
    labels = np.where(idx == n_known, OPEN, idx)
    return conf >= th, labels, conf


def pseudo_label(state: MeosdaState, target: DomainDataset, th: float) -> PseudoLabeledSet:
    """Label confident target samples with the ensemble prediction.

    With a single head the ensemble rule reduces to that head's argmax.
    """
    _, _, chosen, _ = ensemble_arrays(predict_all(state, target.features))
    keep, labels, conf = threshold_accept(chosen, th, state.n_known)
    ds = DomainDataset(target.domain_id, target.features[keep], labels[keep], labels_visible=True)
    return PseudoLabeledSet(ds, conf[keep], int((~keep).sum()))


# ------------------------------------------------------------- checkpoints


def save_state(state: MeosdaState, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = state.config
    manifest = {
        "feat_dim": state.extractor_spec.in_dim,
        "n_known": state.n_known,
        "head_count": state.n_heads,
        "head_domains": ",".join(str(d) for d in state.head_domains),
        "t_boundary": repr(cfg.t_boundary),
        "threshold": repr(state.threshold),
        "extractor_dims": ",".join(str(d) for d in cfg.extractor_dims),
        "head_hidden": cfg.head_hidden,
        "batch_norm": int(cfg.batch_norm),
        "slope": repr(cfg.slope),
        "lr": repr(cfg.lr),
        "beta1": repr(cfg.beta1),
        "beta2": repr(cfg.beta2),
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "grl_lambda": repr(cfg.grl_lambda),
        "adv_weight": repr(cfg.adv_weight),
    }
    dc.write_manifest(manifest, directory / "meosda.manifest")
    dc.save_params(state.extractor, directory / "meosda_extractor.params")
    dc.save_adam(state.extractor_opt, directory / "meosda_extractor.adam")
    for m, (params, opt) in enumerate(zip(state.heads, state.head_opts)):
        dc.save_params(params, directory / f"meosda_head{m}.params")
        dc.save_adam(opt, directory / f"meosda_head{m}.adam")


def load_state(directory: str | Path) -> MeosdaState:
    directory = Path(directory)
    m = dc.read_manifest(directory / "meosda.manifest")
    cfg = MeosdaConfig(
        extractor_dims=tuple(int(v) for v in m["extractor_dims"].split(",")),
        head_hidden=int(m["head_hidden"]), batch_norm=bool(int(m["batch_norm"])), slope=float(m["slope"]),
        lr=float(m["lr"]), beta1=float(m["beta1"]), beta2=float(m["beta2"]), batch_size=int(m["batch_size"]),
        epochs=int(m["epochs"]), t_boundary=float(m["t_boundary"]), grl_lambda=float(m["grl_lambda"]),
        adv_weight=float(m["adv_weight"]),
    )
    domains = [int(v) for v in m["head_domains"].split(",")]
    state = init_state(int(m["n_known"]), int(m["feat_dim"]), domains, cfg, np.random.default_rng(0))
    state.threshold = float(m["threshold"])
    state.extractor = dc.load_params(directory / "meosda_extractor.params")
    state.extractor_opt = dc.load_adam(directory / "meosda_extractor.adam")
    state.heads = [dc.load_params(directory / f"meosda_head{i}.params") for i in range(len(domains))]
    state.head_opts = [dc.load_adam(directory / f"meosda_head{i}.adam") for i in range(len(domains))]
    return state
