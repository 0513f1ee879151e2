"""Gradient verification battery: primitive ops first, then every loss.

Op-level checks pin down which backward rule is wrong when something fails;
loss-level checks then validate the full graphs the trainer actually builds,
at many random parameter points.  Losses containing a stop-gradient are
differentiated against their frozen form (the uncertainty replaced by its
current value), which is the function their gradient is defined to be; a
separate bit-exactness check confirms the two forms agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Graph, grad_check
from .encoders import (EmbeddingBatch, ModelDims, init_model, leaf_group,
                       params_to_dict)
from .losses import LossWeights, itc_loss, itm_loss, gitm_batch_loss, uitc_loss
from .mining import MiningConfig, build_groups
from .training import StepData, assemble_losses, encode_step

LOSS_NAMES = ("itc", "uitc", "itm", "gitm", "total")

_CHECK_DIMS = ModelDims(raw_dim_image=4, raw_dim_text=3, hidden_dim=4, embed_dim=3)
_CHECK_BATCH = 3
_CHECK_K = 1


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


@dataclass
class BatteryReport:
    ops: list[CheckResult] = field(default_factory=list)
    losses: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.ops + self.losses)

    def failures(self) -> list[CheckResult]:
        return [r for r in self.ops + self.losses if not r.passed]


# -- primitive op checks -------------------------------------------------------


def _op_cases(rng: np.random.Generator):
    """(name, params, loss_fn) triples, one scalar probe per primitive."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    bias = rng.normal(size=2)
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    c34 = rng.normal(size=(3, 4))
    c32 = rng.normal(size=(3, 2))
    c33 = rng.normal(size=(3, 3))
    c3 = rng.normal(size=3)
    frozen = rng.normal(size=(3, 4))

    def weighted(build, const):
        return lambda g, lv: g.sum(g.mul(build(g, lv), g.constant(const)))

    return [
        ("add", {"a": a, "b": b}, weighted(lambda g, lv: g.add(lv["a"], lv["b"]), c34)),
        ("mul", {"a": a, "b": b}, weighted(lambda g, lv: g.mul(lv["a"], lv["b"]), c34)),
        ("affine", {"x": a, "w": w, "b": bias},
         weighted(lambda g, lv: g.affine(lv["x"], lv["w"], lv["b"]), c32)),
        ("tanh", {"x": a}, weighted(lambda g, lv: g.tanh(lv["x"]), c34)),
        ("exp", {"x": a}, weighted(lambda g, lv: g.exp(lv["x"]), c34)),
        ("log", {"x": pos}, weighted(lambda g, lv: g.log(lv["x"]), c34)),
        ("sigmoid", {"x": a}, weighted(lambda g, lv: g.sigmoid(lv["x"]), c34)),
        ("l2_normalize", {"x": a},
         weighted(lambda g, lv: g.l2_normalize(lv["x"]), c34)),
        ("cosine_matrix", {"a": a, "b": b},
         weighted(lambda g, lv: g.cosine_matrix(lv["a"], lv["b"]), c33)),
        ("softmax_rows", {"x": a},
         weighted(lambda g, lv: g.softmax_rows(lv["x"]), c34)),
        ("sum_rows", {"x": a},
         lambda g, lv: g.sum(g.mul(g.sum_rows(lv["x"]), g.constant(c3)))),
        ("sum", {"x": a}, lambda g, lv: g.mul(g.sum(lv["x"]), 0.7)),
        ("mean", {"x": a}, lambda g, lv: g.mul(g.mean(lv["x"]), 1.3)),
        # detach carries no gradient, so its check differentiates the frozen
        # form where the detached operand is the constant it evaluates to.
        ("detach", {"x": a},
         weighted(lambda g, lv: g.mul(g.detach(g.constant(frozen)), lv["x"]), c34)),
    ]


def check_ops(seed: int = 0, points: int = 5, eps: float = 1e-5,
              tol: float = 1e-4) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for point in range(points):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 404, point]))
        for name, params, fn in _op_cases(rng):
            report = grad_check(fn, params, eps=eps, tol=tol)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    return [CheckResult(f"op:{name}", err, tol) for name, err in worst.items()]


# -- loss-level checks ---------------------------------------------------------


@dataclass
class LossInstance:
    """One frozen random problem: parameters, raw batch, mined groups, u value."""

    params: dict[str, np.ndarray]
    data: StepData
    groups: list
    u_mean: float
    mapping: str = "exponential"
    weights: LossWeights = field(default_factory=LossWeights)


def random_instance(rng: np.random.Generator, dims: ModelDims = _CHECK_DIMS,
                    n: int = _CHECK_BATCH, k: int = _CHECK_K) -> LossInstance:
    """Draw parameters and a batch, then freeze mining and uncertainty.

    Temperatures are drawn near 0.5 rather than the training init: sharper
    softmaxes raise third derivatives and with them the finite-difference
    truncation error, which is noise here, not signal.
    """
    base = params_to_dict(init_model(0, dims))
    params = {kk: rng.normal(0.0, 0.5, size=v.shape) for kk, v in base.items()}
    params["log_tau"] = np.asarray(np.log(0.5) + rng.normal(0.0, 0.2))
    params["log_gamma"] = np.asarray(rng.normal(0.0, 0.3))
    data = StepData(
        raw_image=rng.normal(size=(n, dims.raw_dim_image)),
        raw_text=rng.normal(size=(n, dims.raw_dim_text)),
        weak_raw_image=rng.normal(size=(n, dims.raw_dim_image)),
        weak_raw_text=rng.normal(size=(n, dims.raw_dim_text)),
        identities=np.arange(n),
    )
    g = Graph()
    leaves = {kk: g.leaf(v, name=kk) for kk, v in params.items()}
    enc = encode_step(g, leaves, data, need_weak=True)
    batch = EmbeddingBatch(enc[0].value, enc[1].value, enc[2].value, enc[3].value,
                           data.identities)
    groups = build_groups(batch, MiningConfig("custom", k))
    assembled = assemble_losses(g, leaves, enc, groups, "uitc_gitm",
                                "exponential", LossWeights())
    return LossInstance(params, data, groups, assembled.u_mean)


def _param_subset(params: dict[str, np.ndarray], *prefixes: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in params.items()
            if any(k == p or k.startswith(p + ".") for p in prefixes)}


def loss_builder(name: str, inst: LossInstance):
    """A grad_check-compatible (graph, leaves) -> scalar node builder."""

    def towers(g, lv, need_weak):
        # Parameters outside the checked subset stay at their frozen values.
        full = {k: (lv[k] if k in lv else g.constant(v, name=k))
                for k, v in inst.params.items()}
        return full, encode_step(g, full, inst.data, need_weak)

    if name == "itc":
        def fn(g, lv):
            full, enc = towers(g, lv, need_weak=False)
            return itc_loss(g, enc[0], enc[1], full["log_tau"])
    elif name == "uitc":
        def fn(g, lv):
            full, enc = towers(g, lv, need_weak=True)
            weak = g.mul(g.add(itc_loss(g, enc[0], enc[3], full["log_tau"]),
                               itc_loss(g, enc[2], enc[1], full["log_tau"])), 0.5)
            return uitc_loss(g, weak, g.constant(inst.u_mean), full["log_gamma"])
    elif name == "itm":
        def fn(g, lv):
            full, enc = towers(g, lv, need_weak=False)
            return itm_loss(g, leaf_group(full, "head"), enc[0], enc[1], inst.groups)
    elif name == "gitm":
        def fn(g, lv):
            full, enc = towers(g, lv, need_weak=True)
            txt, img = gitm_batch_loss(g, leaf_group(full, "head"), *enc, inst.groups)
            return g.add(txt, img)
    elif name == "total":
        def fn(g, lv):
            full, enc = towers(g, lv, need_weak=True)
            out = assemble_losses(g, full, enc, inst.groups, "uitc_gitm",
                                  inst.mapping, inst.weights,
                                  u_override=inst.u_mean)
            return out.nodes["total"]
    else:
        raise ValueError(f"unknown loss {name!r}")
    return fn


def loss_params(name: str, inst: LossInstance) -> dict[str, np.ndarray]:
    if name == "itc":
        return _param_subset(inst.params, "img", "txt", "log_tau")
    if name == "uitc":
        return _param_subset(inst.params, "img", "txt", "log_tau", "log_gamma")
    if name in ("itm", "gitm"):
        return _param_subset(inst.params, "img", "txt", "head")
    if name == "total":
        return dict(inst.params)
    raise ValueError(f"unknown loss {name!r}")


def check_losses(points: int = 100, seed: int = 0, eps: float = 1e-5,
                 tol: float = 1e-4) -> list[CheckResult]:
    worst = {name: 0.0 for name in LOSS_NAMES}
    for point in range(points):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 505, point]))
        inst = random_instance(rng)
        for name in LOSS_NAMES:
            report = grad_check(loss_builder(name, inst), loss_params(name, inst),
                                eps=eps, tol=tol)
            worst[name] = max(worst[name], report.max_rel_error)
    return [CheckResult(f"loss:{name}", worst[name], tol) for name in LOSS_NAMES]


def uitc_gradients(inst: LossInstance, frozen: bool):
    """Gradients of the weak-pair loss, detached or constant-substituted."""
    g = Graph()
    leaves = {k: g.leaf(v, trainable=True, name=k) for k, v in inst.params.items()}
    enc = encode_step(g, leaves, inst.data, need_weak=True)
    out = assemble_losses(g, leaves, enc, inst.groups, "uitc", inst.mapping,
                          inst.weights,
                          u_override=inst.u_mean if frozen else None)
    grads = g.backward(out.nodes["uitc"])
    return {k: grads[leaves[k]] for k in inst.params}


def stop_gradient_bitexact(inst: LossInstance) -> bool:
    """Detached and frozen forms must agree to the last bit, per parameter."""
    detached = uitc_gradients(inst, frozen=False)
    frozen = uitc_gradients(inst, frozen=True)
    return all(np.array_equal(detached[k], frozen[k]) for k in detached)


def run_battery(points: int = 100, seed: int = 0, eps: float = 1e-5,
                tol: float = 1e-4) -> BatteryReport:
    return BatteryReport(ops=check_ops(seed=seed, eps=eps, tol=tol),
                         losses=check_losses(points=points, seed=seed, eps=eps, tol=tol))
