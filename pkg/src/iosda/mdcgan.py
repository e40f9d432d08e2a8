"""Class- and domain-conditioned feature GAN used to replay past domains.

The generator maps ``[z, y, d]`` (noise, one-hot class over K known classes
plus one open slot, LSB-first binary code of ``domain_id - 1``) to a feature
vector.  The discriminator is a shared trunk over ``[x, y, d]`` with three
linear heads: real/fake, class and domain.

Training alternates two Adam steps:

1. trunk and heads descend ``L_b + L_c + L_d`` (all negative log-likelihoods
   over the concatenated real and fake batch);
2. the generator descends ``L_c + L_d - L_b + R`` where ``R`` is the mean
   squared distance between each fake and the real sample it was drawn for.
   The ``-L_b`` part is obtained by reversing the gradient that leaves the
   real/fake head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .datahub import HIDDEN, OPEN, DomainDataset
from .errors import DataError, EmptyDatasetError, NumericError, ShapeError

log = logging.getLogger(__name__)

HEADS = ("b", "c", "d")
REAL, FAKE = 1, 0


@dataclass(frozen=True)
class GanConfig:
    z_dim: int = 2000
    d_dim: int = 3
    gen_hidden: tuple[int, ...] = (1024, 1024)
    disc_hidden: tuple[int, ...] = (1024, 1024, 1024)
    slope: float = dc.DEFAULT_SLOPE
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9
    batch_size: int = 64
    epochs: int = 200
    replay_open_class: bool = True


@dataclass(frozen=True)
class GanConditioning:
    n_known: int
    feat_dim: int = 2048
    z_dim: int = 2000
    d_dim: int = 3

    @property
    def y_dim(self) -> int:
        return self.n_known + 1

    @property
    def n_domains(self) -> int:
        return 2 ** self.d_dim

    @property
    def cond_dim(self) -> int:
        return self.y_dim + self.d_dim


@dataclass
class GanLossReport:
    l_b: float
    l_c: float
    l_d: float
    r: float


@dataclass
class MdcganState:
    cond: GanConditioning
    config: GanConfig
    gen_spec: dc.MlpSpec
    trunk_spec: dc.MlpSpec
    head_specs: dict[str, dc.MlpSpec]
    gen: dc.ParamSet
    disc: dc.ParamSet
    gen_opt: dc.AdamState
    disc_opt: dc.AdamState
    # label codes seen per domain during training; drives what gets replayed
    class_sets: dict[int, tuple[int, ...]] = field(default_factory=dict)


def init_state(n_known: int, feat_dim: int, config: GanConfig, rng: np.random.Generator) -> MdcganState:
    cond = GanConditioning(n_known, feat_dim, config.z_dim, config.d_dim)
    gen_spec = dc.MlpSpec((config.z_dim + cond.cond_dim, *config.gen_hidden, feat_dim),
                          slope=config.slope, output_activation="linear")
    trunk_spec = dc.MlpSpec((feat_dim + cond.cond_dim, *config.disc_hidden),
                            slope=config.slope, output_activation="leaky_relu")
    h = trunk_spec.out_dim
    head_specs = {
        "b": dc.MlpSpec((h, 2)),
        "c": dc.MlpSpec((h, cond.y_dim)),
        "d": dc.MlpSpec((h, cond.n_domains)),
    }
    gen = dc.init_params(gen_spec, rng)
    disc = dc.prefixed(dc.init_params(trunk_spec, rng), "trunk.")
    for name in HEADS:
        disc.update(dc.prefixed(dc.init_params(head_specs[name], rng), f"{name}."))
    opt = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    return MdcganState(cond, config, gen_spec, trunk_spec, head_specs, gen, disc,
                       dc.adam_init(gen, **opt), dc.adam_init(disc, **opt))


# ------------------------------------------------------------ conditions


def class_index(labels: np.ndarray, n_known: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels == HIDDEN):
        raise DataError("conditioning needs Known or Open labels, got hidden ones")
    if np.any((labels < OPEN) | (labels >= n_known)):
        raise ValueError(f"class labels must be in [0, {n_known}) or open")
    return np.where(labels == OPEN, n_known, labels)


def encode_conditions(labels: np.ndarray, domain_ids: np.ndarray, n_known: int, d_dim: int) -> np.ndarray:
    """Rows of ``[one-hot class (K+1), binary(domain_id - 1) LSB first (d_dim)]``."""
    y = class_index(labels, n_known)
    dom = np.asarray(domain_ids, dtype=np.int64)
    if np.any(dom < 1) or np.any(dom > 2 ** d_dim):
        raise ValueError(f"domain ids must lie in [1, {2 ** d_dim}] for a {d_dim}-bit code")
    out = np.zeros((y.size, n_known + 1 + d_dim))
    out[np.arange(y.size), y] = 1.0
    code = dom - 1
    for bit in range(d_dim):
        out[:, n_known + 1 + bit] = (code >> bit) & 1
    return out


def encode_condition(label: int, domain_id: int, n_known: int, d_dim: int = 3) -> np.ndarray:
    return encode_conditions(np.array([label]), np.array([domain_id]), n_known, d_dim)[0]


# ---------------------------------------------------------- forward parts


def _generator(state: MdcganState, z: np.ndarray, cond: np.ndarray):
    return dc.forward(state.gen_spec, state.gen, np.hstack([z, cond]))


def _disc_forward(state: MdcganState, x: np.ndarray, cond: np.ndarray):
    trunk = dc.view(state.disc, "trunk.")
    h, t_trunk = dc.forward(state.trunk_spec, trunk, np.hstack([x, cond]))
    logits, tapes = {}, {}
    for name in HEADS:
        logits[name], tapes[name] = dc.forward(state.head_specs[name], dc.view(state.disc, f"{name}."), h)
    return logits, t_trunk, tapes


def _disc_backward(state: MdcganState, t_trunk, tapes, dlogits: dict[str, np.ndarray],
                   reverse: dict[str, float] | None = None):
    """Parameter grads of the discriminator and the gradient w.r.t. its feature input.

    ``reverse`` maps a head name to a reversal strength applied where that
    head's gradient enters the trunk.
    """
    reverse = reverse or {}
    grads: dc.ParamSet = {}
    dh = None
    for name, g in dlogits.items():
        hg, gin = dc.backward(tapes[name], dc.view(state.disc, f"{name}."), g)
        dc.add_grads(grads, hg, f"{name}.")
        if name in reverse:
            gin = dc.grad_reverse(gin, reverse[name])
        dh = gin if dh is None else dh + gin
    tg, dx = dc.backward(t_trunk, dc.view(state.disc, "trunk."), dh)
    dc.add_grads(grads, tg, "trunk.")
    return grads, dx[:, : state.cond.feat_dim]


def _targets(state: MdcganState, labels: np.ndarray, domains: np.ndarray):
    y = class_index(labels, state.cond.n_known)
    d = np.asarray(domains, dtype=np.int64) - 1
    return y, d


def gan_losses(state: MdcganState, x_real: np.ndarray, labels: np.ndarray, domains: np.ndarray,
               x_fake: np.ndarray) -> GanLossReport:
    """Loss values for a condition-matched real/fake pair of batches (no update).

    Row i of ``x_fake`` must have been generated for ``(labels[i], domains[i])``.
    """
    if x_real.shape != x_fake.shape:
        raise ShapeError(f"real batch {x_real.shape} and fake batch {x_fake.shape} differ")
    cond = encode_conditions(labels, domains, state.cond.n_known, state.cond.d_dim)
    y, d = _targets(state, labels, domains)
    n = x_real.shape[0]
    logits, _, _ = _disc_forward(state, np.vstack([x_real, x_fake]), np.vstack([cond, cond]))
    l_b, _ = dc.nll_loss(logits["b"], np.r_[np.full(n, REAL), np.full(n, FAKE)])
    l_c, _ = dc.nll_loss(logits["c"], np.r_[y, y])
    l_d, _ = dc.nll_loss(logits["d"], np.r_[d, d])
    r = float(((x_fake - x_real) ** 2).sum(axis=1).mean()) if n else 0.0
    return GanLossReport(l_b, l_c, l_d, r)


def discriminator_grads(state: MdcganState, x_real, labels, domains, x_fake):
    """Gradient of ``L_b + L_c + L_d`` w.r.t. trunk and head parameters."""
    cond = encode_conditions(labels, domains, state.cond.n_known, state.cond.d_dim)
    y, d = _targets(state, labels, domains)
    n = x_real.shape[0]
    logits, t_trunk, tapes = _disc_forward(state, np.vstack([x_real, x_fake]), np.vstack([cond, cond]))
    l_b, g_b = dc.nll_loss(logits["b"], np.r_[np.full(n, REAL), np.full(n, FAKE)])
    l_c, g_c = dc.nll_loss(logits["c"], np.r_[y, y])
    l_d, g_d = dc.nll_loss(logits["d"], np.r_[d, d])
    grads, _ = _disc_backward(state, t_trunk, tapes, {"b": g_b, "c": g_c, "d": g_d})
    return l_b + l_c + l_d, grads


def generator_grads(state: MdcganState, z, x_real, labels, domains,
                    terms: Sequence[str] = ("b", "c", "d", "r"), reverse: bool = True,
                    grl_lambda: float = 1.0):
    """Gradient of ``L_c + L_d - L_b + R`` w.r.t. the generator parameters.

    The losses are normalised exactly as in :func:`gan_losses` (head losses
    over the 2n real+fake rows, R over the n pairs); only the fake half
    depends on the generator.  ``terms`` selects which pieces to include and
    ``reverse=False`` removes the reversal on the real/fake path, which turns
    ``-L_b`` into ``+L_b``; both exist for gradient checks.
    """
    cond = encode_conditions(labels, domains, state.cond.n_known, state.cond.d_dim)
    y, d = _targets(state, labels, domains)
    n = x_real.shape[0]
    fake, t_gen = _generator(state, z, cond)
    logits, t_trunk, tapes = _disc_forward(state, fake, cond)
    dlogits = {}
    if "b" in terms:
        dlogits["b"] = 0.5 * dc.nll_loss(logits["b"], np.full(n, FAKE))[1]
    if "c" in terms:
        dlogits["c"] = 0.5 * dc.nll_loss(logits["c"], y)[1]
    if "d" in terms:
        dlogits["d"] = 0.5 * dc.nll_loss(logits["d"], d)[1]
    dfake = np.zeros_like(fake)
    if dlogits:
        rev = {"b": grl_lambda} if reverse else {}
        _, dfake = _disc_backward(state, t_trunk, tapes, dlogits, rev)
    if "r" in terms:
        dfake = dfake + 2.0 * (fake - x_real) / n
    grads, _ = dc.backward(t_gen, state.gen, dfake)
    return fake, grads


# ----------------------------------------------------------------- public


def generate(state: MdcganState, label: int, domain_id: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` replayed feature vectors for one (class, domain) condition."""
    if n == 0:
        return np.zeros((0, state.cond.feat_dim))
    labels = np.full(n, label)
    domains = np.full(n, domain_id)
    return generate_for(state, labels, domains, rng)


def generate_for(state: MdcganState, labels: np.ndarray, domains: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    cond = encode_conditions(labels, domains, state.cond.n_known, state.cond.d_dim)
    z = rng.standard_normal((cond.shape[0], state.cond.z_dim))
    out, _ = _generator(state, z, cond)
    return out


def _update(state: MdcganState, x_real, labels, domains, rng) -> None:
    fake = generate_for(state, labels, domains, rng)
    loss, grads = discriminator_grads(state, x_real, labels, domains, fake)
    dc.check_finite("discriminator loss", loss)
    dc.adam_step(state.disc, grads, state.disc_opt)
    z = rng.standard_normal((x_real.shape[0], state.cond.z_dim))
    fake, grads = generator_grads(state, z, x_real, labels, domains)
    if not np.all(np.isfinite(fake)):
        raise NumericError("generator produced non-finite features")
    dc.adam_step(state.gen, grads, state.gen_opt)


def train_step(state: MdcganState, x_real: np.ndarray, labels: np.ndarray, domains: np.ndarray,
               rng: np.random.Generator) -> GanLossReport:
    """One discriminator step then one generator step; returns losses after both."""
    if x_real.shape[0] == 0:
        raise EmptyDatasetError("train_step needs a non-empty real batch")
    _update(state, x_real, labels, domains, rng)
    report = gan_losses(state, x_real, labels, domains, generate_for(state, labels, domains, rng))
    values = (report.l_b, report.l_c, report.l_d, report.r)
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite GAN losses {values}")
    return report


def pool_arrays(pool: Sequence[DomainDataset], replay_open_class: bool = True):
    """Stack labelled datasets into (features, labels, domain ids)."""
    xs, ys, ds = [], [], []
    for ds_ in pool:
        if np.any(ds_.labels == HIDDEN):
            raise DataError(f"domain {ds_.domain_id}: GAN training needs labelled samples")
        keep = np.ones(len(ds_), dtype=bool) if replay_open_class else ds_.labels != OPEN
        xs.append(ds_.features[keep])
        ys.append(ds_.labels[keep])
        ds.append(np.full(int(keep.sum()), ds_.domain_id))
    if not xs or sum(len(y) for y in ys) == 0:
        raise EmptyDatasetError("GAN training pool is empty")
    return np.vstack(xs), np.concatenate(ys), np.concatenate(ds)


def train_replay_gan(pool: Sequence[DomainDataset], n_known: int, config: GanConfig,
                     rng: np.random.Generator) -> MdcganState:
    """Train a fresh GAN on labelled (real or replayed) samples of several domains."""
    x, y, d = pool_arrays(pool, config.replay_open_class)
    state = init_state(n_known, x.shape[1], config, rng)
    for dom in np.unique(d):
        state.class_sets[int(dom)] = tuple(sorted(set(y[d == dom].tolist()), key=lambda c: (c < 0, c)))
    n = x.shape[0]
    bs = config.batch_size
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            _update(state, x[idx], y[idx], d[idx], rng)
        if log.isEnabledFor(logging.DEBUG) and (epoch + 1) % max(1, config.epochs // 5) == 0:
            idx = perm[:bs]
            rep = gan_losses(state, x[idx], y[idx], d[idx], generate_for(state, y[idx], d[idx], rng))
            log.debug("gan epoch %d: L_b=%.4f L_c=%.4f L_d=%.4f R=%.4f", epoch + 1, rep.l_b, rep.l_c, rep.l_d, rep.r)
    return state


def class_head_accuracy(state: MdcganState, x: np.ndarray, labels: np.ndarray, domains: np.ndarray) -> float:
    cond = encode_conditions(labels, domains, state.cond.n_known, state.cond.d_dim)
    logits, _, _ = _disc_forward(state, x, cond)
    return float((np.argmax(logits["c"], axis=1) == class_index(labels, state.cond.n_known)).mean())


# ------------------------------------------------------------- checkpoints


def _fmt_tuple(t: Sequence[int]) -> str:
    return ",".join(str(v) for v in t)


def save_state(state: MdcganState, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = state.config
    manifest = {
        "feat_dim": state.cond.feat_dim,
        "n_known": state.cond.n_known,
        "z_dim": cfg.z_dim,
        "d_dim": cfg.d_dim,
        "domain_count": len(state.class_sets),
        "gen_hidden": _fmt_tuple(cfg.gen_hidden),
        "disc_hidden": _fmt_tuple(cfg.disc_hidden),
        "slope": repr(cfg.slope),
        "lr": repr(cfg.lr),
        "beta1": repr(cfg.beta1),
        "beta2": repr(cfg.beta2),
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "replay_open_class": int(cfg.replay_open_class),
        "class_sets": ";".join(f"{k}:{_fmt_tuple(v)}" for k, v in sorted(state.class_sets.items())),
    }
    dc.write_manifest(manifest, directory / "mdcgan.manifest")
    dc.save_params(state.gen, directory / "mdcgan_generator.params")
    dc.save_params(state.disc, directory / "mdcgan_discriminator.params")
    dc.save_adam(state.gen_opt, directory / "mdcgan_generator.adam")
    dc.save_adam(state.disc_opt, directory / "mdcgan_discriminator.adam")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v != "")


def load_state(directory: str | Path) -> MdcganState:
    directory = Path(directory)
    m = dc.read_manifest(directory / "mdcgan.manifest")
    cfg = GanConfig(z_dim=int(m["z_dim"]), d_dim=int(m["d_dim"]), gen_hidden=_ints(m["gen_hidden"]),
                    disc_hidden=_ints(m["disc_hidden"]), slope=float(m["slope"]), lr=float(m["lr"]),
                    beta1=float(m["beta1"]), beta2=float(m["beta2"]), batch_size=int(m["batch_size"]),
                    epochs=int(m["epochs"]), replay_open_class=bool(int(m["replay_open_class"])))
    state = init_state(int(m["n_known"]), int(m["feat_dim"]), cfg, np.random.default_rng(0))
    state.gen = dc.load_params(directory / "mdcgan_generator.params")
    state.disc = dc.load_params(directory / "mdcgan_discriminator.params")
    state.gen_opt = dc.load_adam(directory / "mdcgan_generator.adam")
    state.disc_opt = dc.load_adam(directory / "mdcgan_discriminator.adam")
    for part in filter(None, m["class_sets"].split(";")):
        dom, _, classes = part.partition(":")
        state.class_sets[int(dom)] = _ints(classes)
    return state
