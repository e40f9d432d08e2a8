"""Finite-difference checks of every training gradient on tiny networks.

Each check compares the analytic gradient with central differences of the
corresponding scalar objective and reports the worst relative error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import mdcgan, meosda
from .datahub import OPEN

TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    n_params: int
    rel_err: float

    @property
    def ok(self) -> bool:
        return self.rel_err < TOLERANCE


def numeric_grad(f: Callable[[], float], arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def rel_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray], floor: float = 1e-8) -> float:
    worst = 0.0
    for k, num in numeric.items():
        err = np.abs(analytic[k] - num)
        scale = np.maximum(np.abs(analytic[k]), np.abs(num))
        rel = np.where(err <= floor, 0.0, err / np.maximum(scale, 1e-300))
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst


def _trainable(params):
    return {k: params[k] for k in dc.trainable(params)}


def _check(name, analytic, params, f) -> CheckResult:
    tr = _trainable(params)
    return CheckResult(name, sum(v.size for v in tr.values()), rel_error(analytic, numeric_grad(f, tr)))


def check_mlp_losses(rng: np.random.Generator) -> list[CheckResult]:
    spec = dc.MlpSpec((3, 5, 4), batch_norm=(True, False))
    params = dc.init_params(spec, rng)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 4, size=6)
    out = []
    for name, loss in (("mlp cross-entropy", lambda lg: dc.nll_loss(lg, y)),
                       ("mlp boundary loss", lambda lg: dc.boundary_loss(lg, 0.5, slot=3))):
        logits, tape = dc.forward(spec, params, x)
        grads, _ = dc.backward(tape, params, loss(logits)[1])
        out.append(_check(name, grads, params, lambda: loss(dc.forward(spec, params, x)[0])[0]))
    return out


def check_gan(rng: np.random.Generator) -> list[CheckResult]:
    cfg = mdcgan.GanConfig(z_dim=3, d_dim=2, gen_hidden=(4,), disc_hidden=(4,))
    st = mdcgan.init_state(2, 3, cfg, rng)
    x = rng.normal(size=(6, 3))
    y = np.array([0, 1, OPEN, 0, 1, OPEN])
    d = np.array([1, 2, 3, 4, 1, 2])
    fake = mdcgan.generate_for(st, y, d, rng)
    _, dgrads = mdcgan.discriminator_grads(st, x, y, d, fake)

    def disc_obj():
        r = mdcgan.gan_losses(st, x, y, d, fake)
        return r.l_b + r.l_c + r.l_d

    z = rng.standard_normal((6, cfg.z_dim))
    cond = mdcgan.encode_conditions(y, d, 2, cfg.d_dim)
    _, ggrads = mdcgan.generator_grads(st, z, x, y, d)

    def gen_obj():
        f, _ = dc.forward(st.gen_spec, st.gen, np.hstack([z, cond]))
        r = mdcgan.gan_losses(st, x, y, d, f)
        return r.l_c + r.l_d - r.l_b + r.r

    return [_check("gan discriminator L_b+L_c+L_d", dgrads, st.disc, disc_obj),
            _check("gan generator L_c+L_d-L_b+R", ggrads, st.gen, gen_obj)]


def check_meosda(rng: np.random.Generator) -> list[CheckResult]:
    cfg = meosda.MeosdaConfig(extractor_dims=(4, 3), head_hidden=3)
    st = meosda.init_state(2, 3, [1, 2], cfg, rng)
    sources = [(rng.normal(size=(5, 3)) + m, rng.choice([0, 1, OPEN], size=5)) for m in range(2)]
    target = rng.normal(size=(4, 3))
    _, ext_grads, head_grads = meosda.adaptation_grads(st, sources, target)

    def parts():
        blocks = [s for s, _ in sources] + [target]
        feats, _ = dc.forward(st.extractor_spec, st.extractor, np.vstack(blocks), train=True)
        ce, adv = [], []
        for m, (xs, ys) in enumerate(sources):
            rows = np.vstack([feats[5 * m:5 * (m + 1)], feats[10:]])
            lg, _ = dc.forward(st.head_spec, st.heads[m], rows, train=True)
            ce.append(dc.nll_loss(lg[:5], meosda.label_targets(ys, 2))[0])
            adv.append(dc.boundary_loss(lg[5:], cfg.t_boundary, slot=2)[0])
        return ce, adv

    def head_obj(m):
        def f():
            ce, adv = parts()
            return ce[m] + adv[m]
        return f

    def ext_obj():
        ce, adv = parts()
        return sum(ce) - sum(adv)

    out = [_check(f"adapter head {m} CE+ADV", head_grads[m], st.heads[m], head_obj(m)) for m in range(2)]
    out.append(_check("adapter extractor CE-ADV (reversed)", ext_grads, st.extractor, ext_obj))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return check_mlp_losses(rng) + check_gan(rng) + check_meosda(rng)
