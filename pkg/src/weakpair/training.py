"""Deterministic training loop, optimizer, schedule, and checkpointing.

Every stochastic choice is drawn from a generator seeded by (config seed,
purpose tag, epoch-or-step index), never from a long-lived stream.  That
makes the trajectory a pure function of (config, data) and makes mid-run
save/load exact: resuming at step k replays nothing and perturbs nothing,
because step k's randomness never depended on steps before it.

One optimizer step: assemble a batch of one record per identity, draw each
anchor's weak counterpart, encode anchors and weak counterparts, mine hard
negatives from the current embeddings, evaluate the configured losses, and
apply an Adam update with decoupled weight decay under a linear
warmup-then-decay schedule (peak to peak/10 at the final step).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autograd import Array, Graph, Node
from .data import DatasetManifest, PairRecord
from .encoders import (EmbeddingBatch, ModelDims, encode, init_model,
                       leaf_group, params_to_dict)
from .losses import (ClampCounter, LossReport, LossWeights, MAPPINGS,
                     consistency_uncertainty, gitm_batch_loss, itc_loss,
                     itm_loss, total_loss, uitc_loss)
from .mining import (MiningConfig, MiningStarvationError, PairGroup,
                     build_groups, sample_weak)

CHECKPOINT_VERSION = 1
ABLATION_MODES = ("baseline", "uitc", "uitc_gitm")

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8
_NO_DECAY = ("log_tau", "log_gamma")

_MASK64 = (1 << 64) - 1


class NumericAbort(RuntimeError):
    """Training hit a non-finite value or a collapsed embedding."""


class CheckpointFormatError(ValueError):
    """Checkpoint file is unreadable or from an incompatible version."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 1e-3
    warmup_steps: int = 20
    weight_decay: float = 0.01
    seed: int = 0
    alpha: float = 0.5
    beta: float = 0.1
    mining_mode: str = "neg3v6"
    mining_k: int = 2
    mapping: str = "exponential"
    embed_dim: int = 16
    hidden_dim: int = 32
    tau_init: float = 0.07
    ablation_mode: str = "uitc_gitm"

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.mapping not in MAPPINGS:
            raise ValueError(f"unknown mapping {self.mapping!r}")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation_mode {self.ablation_mode!r}")
        if self.tau_init <= 0:
            raise ValueError(f"tau_init must be positive, got {self.tau_init}")
        self.mining()  # raises on an inconsistent mode/k combination

    def mining(self) -> MiningConfig:
        return MiningConfig(self.mining_mode, self.mining_k)

    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)


@dataclass
class StepRecord:
    step: int
    lr: float
    report: LossReport
    u_min: float
    u_max: float
    clamps: int
    wall_time: float


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    starvation: int = 0
    zero_norm_events: int = 0

    def u_extremes(self) -> tuple[float, float] | None:
        """Range of every per-pair uncertainty recorded over the run."""
        seen = [(s.u_min, s.u_max) for s in self.steps if not math.isnan(s.u_min)]
        if not seen:
            return None
        return min(lo for lo, _ in seen), max(hi for _, hi in seen)


@dataclass
class Checkpoint:
    """Complete training state; rng state is the (seed, step) pair itself."""

    version: int
    config: TrainConfig
    params: dict[str, Array]
    opt_m: dict[str, Array]
    opt_v: dict[str, Array]
    opt_t: int
    step: int


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    if (a.version, a.config, a.opt_t, a.step) != (b.version, b.config, b.opt_t, b.step):
        return False
    for da, db in ((a.params, b.params), (a.opt_m, b.opt_m), (a.opt_v, b.opt_v)):
        if da.keys() != db.keys():
            return False
        if any(not np.array_equal(da[k], db[k]) for k in da):
            return False
    return True


def _seed_seq(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([p & _MASK64 for p in parts])


def step_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> base_lr over warmup, then linear base_lr -> base_lr/10."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    last = total_steps - 1
    if last <= cfg.warmup_steps:
        return cfg.base_lr
    frac = (step - cfg.warmup_steps) / (last - cfg.warmup_steps)
    return cfg.base_lr * (1.0 - 0.9 * frac)


@dataclass
class StepData:
    """Raw feature matrices for one batch and its weak counterparts."""

    raw_image: Array
    raw_text: Array
    weak_raw_image: Array
    weak_raw_text: Array
    identities: np.ndarray
    degenerate_weak: int = 0


@dataclass
class AssembledLosses:
    nodes: dict[str, Node | None]
    s_values: Array | None
    u_values: Array | None
    u_mean: float | None
    clamps: int

    def report(self, weights: LossWeights) -> LossReport:
        def val(key: str) -> float:
            node = self.nodes.get(key)
            return float(node.value) if node is not None else 0.0

        return LossReport(
            itc=val("itc"), uitc=val("uitc"), itm=val("itm"),
            gitm_txt=val("gitm_txt"), gitm_img=val("gitm_img"),
            total=val("total"),
            mean_s_w=float(self.s_values.mean()) if self.s_values is not None else 0.0,
            mean_u_w=float(self.u_values.mean()) if self.u_values is not None else 0.0,
        )


def encode_step(g: Graph, leaves, data: StepData, need_weak: bool
                ) -> tuple[Node, Node, Node | None, Node | None]:
    img_tower, txt_tower = leaf_group(leaves, "img"), leaf_group(leaves, "txt")
    f_img = encode(g, img_tower, g.constant(data.raw_image))
    f_txt = encode(g, txt_tower, g.constant(data.raw_text))
    if not need_weak:
        return f_img, f_txt, None, None
    f_img_w = encode(g, img_tower, g.constant(data.weak_raw_image))
    f_txt_w = encode(g, txt_tower, g.constant(data.weak_raw_text))
    return f_img, f_txt, f_img_w, f_txt_w


def assemble_losses(g: Graph, leaves, enc, groups: list[PairGroup], mode: str,
                    mapping: str, weights: LossWeights,
                    clamps: ClampCounter | None = None,
                    u_override: float | None = None) -> AssembledLosses:
    """Build the mode's loss nodes from already-encoded embeddings.

    groups must be mined beforehand (from the same embeddings) so rebuilding
    with perturbed parameters keeps the discrete structure fixed.  With
    u_override the uncertainty subgraph is replaced by that constant, which
    is the frozen form used by finite-difference checks.
    """
    f_img, f_txt, f_img_w, f_txt_w = enc
    head = leaf_group(leaves, "head")
    clamps = clamps if clamps is not None else ClampCounter()
    nodes: dict[str, Node | None] = {
        "itc": itc_loss(g, f_img, f_txt, leaves["log_tau"]),
        "itm": itm_loss(g, head, f_img, f_txt, groups, clamps),
        "uitc": None, "gitm_txt": None, "gitm_img": None,
    }
    s_values = u_values = u_mean = None
    if mode in ("uitc", "uitc_gitm"):
        weak_itc = g.mul(g.add(itc_loss(g, f_img, f_txt_w, leaves["log_tau"]),
                               itc_loss(g, f_img_w, f_txt, leaves["log_tau"])), 0.5)
        if u_override is None:
            unc = consistency_uncertainty(g, f_img, f_txt, f_img_w, f_txt_w, mapping)
            s_values, u_values = unc.s_w.value, unc.u_w.value
            u_node = g.mean(unc.u_w)
            u_mean = float(u_node.value)
        else:
            u_node = g.constant(u_override)
            u_mean = u_override
        nodes["uitc"] = uitc_loss(g, weak_itc, u_node, leaves["log_gamma"])
    if mode == "uitc_gitm":
        nodes["gitm_txt"], nodes["gitm_img"] = gitm_batch_loss(
            g, head, f_img, f_txt, f_img_w, f_txt_w, groups, clamps)
    nodes["total"] = total_loss(g, nodes["itc"], nodes["itm"], nodes["uitc"],
                                nodes["gitm_txt"], nodes["gitm_img"], weights)
    return AssembledLosses(nodes, s_values, u_values, u_mean, clamps.count)


def _epoch_plan(ids: list[int], pools: dict[int, list[PairRecord]],
                cfg: TrainConfig, epoch: int) -> list[PairRecord]:
    """Identity order and per-identity record choice for one epoch."""
    rng = np.random.default_rng(_seed_seq(cfg.seed, 101, epoch))
    order = rng.permutation(len(ids))
    plan = []
    for idx in order:
        records = pools[ids[int(idx)]]
        plan.append(records[int(rng.integers(len(records)))])
    return plan


def _step_data(batch: list[PairRecord], pools, cfg: TrainConfig, step: int,
               need_weak: bool) -> StepData:
    rng = np.random.default_rng(_seed_seq(cfg.seed, 202, step))
    raw_image = np.stack([r.image_raw for r in batch])
    raw_text = np.stack([r.text_raw for r in batch])
    identities = np.array([r.identity for r in batch])
    if not need_weak:
        return StepData(raw_image, raw_text, raw_image, raw_text, identities)
    selections = [sample_weak(r, pools, rng) for r in batch]
    return StepData(
        raw_image, raw_text,
        np.stack([s.weak.image_raw for s in selections]),
        np.stack([s.weak.text_raw for s in selections]),
        identities,
        degenerate_weak=sum(s.degenerate for s in selections),
    )


def _mining_config(cfg: TrainConfig) -> MiningConfig:
    # Pair matching alone only consumes the top-1 candidates, so the lighter
    # modes mine with k=1 regardless of the configured group size.
    if cfg.ablation_mode == "uitc_gitm":
        return cfg.mining()
    return MiningConfig("custom", 1)


def train(cfg: TrainConfig, data: DatasetManifest,
          resume: Checkpoint | None = None,
          stop_at_step: int | None = None) -> tuple[Checkpoint, TrainLog]:
    """Run the configured schedule; stop_at_step yields a mid-run checkpoint.

    A checkpoint written at step k and resumed reproduces the uninterrupted
    trajectory bit for bit, because step k's batch plan, weak picks, and
    learning rate are functions of (config, data, k) alone.
    """
    cfg.validate()
    pools = data.by_identity()
    ids = data.identities()
    if len(ids) < 2:
        raise ValueError("training needs at least 2 identities")
    gen = data.gen_config
    dims = ModelDims(gen.raw_dim_image, gen.raw_dim_text, cfg.hidden_dim, cfg.embed_dim)
    steps_per_epoch = math.ceil(len(ids) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    if resume is None:
        params = params_to_dict(init_model(cfg.seed, dims, cfg.tau_init))
        opt_m = {k: np.zeros_like(v) for k, v in params.items()}
        opt_v = {k: np.zeros_like(v) for k, v in params.items()}
        opt_t, start = 0, 0
    else:
        if resume.config != cfg:
            raise CheckpointFormatError("resume config differs from requested config")
        if resume.step > total_steps:
            raise CheckpointFormatError(
                f"checkpoint is at step {resume.step}, beyond {total_steps} total")
        params = {k: v.copy() for k, v in resume.params.items()}
        opt_m = {k: v.copy() for k, v in resume.opt_m.items()}
        opt_v = {k: v.copy() for k, v in resume.opt_v.items()}
        opt_t, start = resume.opt_t, resume.step

    end_step = total_steps if stop_at_step is None else min(stop_at_step, total_steps)
    mode = cfg.ablation_mode
    need_weak = mode != "baseline"
    mining_cfg = _mining_config(cfg)
    weights = cfg.weights()
    log = TrainLog()
    plan_epoch, plan = -1, []

    for step in range(start, end_step):
        started = time.perf_counter()
        epoch, pos = divmod(step, steps_per_epoch)
        if epoch != plan_epoch:
            plan_epoch, plan = epoch, _epoch_plan(ids, pools, cfg, epoch)
        batch = plan[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        if len(batch) < 2:
            log.starvation += 1
            raise MiningStarvationError(
                f"step {step}: batch of {len(batch)} record(s) cannot supply "
                "different-identity negatives; adjust batch_size or identity count")
        sd = _step_data(batch, pools, cfg, step, need_weak)

        g = Graph()
        leaves = {k: g.leaf(v, trainable=True, name=k) for k, v in params.items()}
        enc = encode_step(g, leaves, sd, need_weak)
        if g.zero_norm_rows:
            log.zero_norm_events += len(g.zero_norm_rows)
            raise NumericAbort(f"step {step}: encoder produced zero-norm embeddings")
        f_img, f_txt, f_img_w, f_txt_w = enc
        batch_emb = EmbeddingBatch(
            f_img.value, f_txt.value,
            f_img_w.value if f_img_w is not None else f_img.value,
            f_txt_w.value if f_txt_w is not None else f_txt.value,
            sd.identities)
        try:
            groups = build_groups(batch_emb, mining_cfg)
        except MiningStarvationError as exc:
            log.starvation += 1
            raise MiningStarvationError(f"step {step}: {exc}") from exc

        assembled = assemble_losses(g, leaves, enc, groups, mode, cfg.mapping, weights)
        report = assembled.report(weights)
        if not math.isfinite(report.total):
            raise NumericAbort(
                f"step {step}: non-finite loss; components itc={report.itc} "
                f"itm={report.itm} uitc={report.uitc} gitm_txt={report.gitm_txt} "
                f"gitm_img={report.gitm_img}")

        grads = g.backward(assembled.nodes["total"])
        lr = step_lr(step, total_steps, cfg)
        opt_t += 1
        bc1 = 1.0 - _ADAM_BETA1 ** opt_t
        bc2 = 1.0 - _ADAM_BETA2 ** opt_t
        for name, leaf in leaves.items():
            grad = grads[leaf]
            opt_m[name] = _ADAM_BETA1 * opt_m[name] + (1.0 - _ADAM_BETA1) * grad
            opt_v[name] = _ADAM_BETA2 * opt_v[name] + (1.0 - _ADAM_BETA2) * grad * grad
            update = (opt_m[name] / bc1) / (np.sqrt(opt_v[name] / bc2) + _ADAM_EPS)
            decay = 0.0 if name in _NO_DECAY else cfg.weight_decay
            params[name] = params[name] - lr * (update + decay * params[name])
            if not np.all(np.isfinite(params[name])):
                raise NumericAbort(f"step {step}: parameter {name} became non-finite")
        assert float(np.exp(params["log_gamma"])) > 0.0
        assert float(np.exp(params["log_tau"])) > 0.0

        if assembled.u_values is not None:
            u_min, u_max = float(assembled.u_values.min()), float(assembled.u_values.max())
        else:
            u_min = u_max = float("nan")
        log.steps.append(StepRecord(step, lr, report, u_min, u_max,
                                    assembled.clamps, time.perf_counter() - started))

    ckpt = Checkpoint(CHECKPOINT_VERSION, cfg, params, opt_m, opt_v, opt_t, end_step)
    return ckpt, log


# -- checkpoint serialization -------------------------------------------------
# JSON with floats rendered by repr round-trips IEEE float64 exactly, and the
# shape records make the file self-describing.


def _encode_arrays(arrays: dict[str, Array]) -> dict:
    return {k: {"shape": list(v.shape), "data": np.asarray(v).reshape(-1).tolist()}
            for k, v in arrays.items()}


def _decode_arrays(payload: dict) -> dict[str, Array]:
    out = {}
    for key, spec in payload.items():
        arr = np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        out[key] = arr
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    payload = {
        "format_version": ckpt.version,
        "config": asdict(ckpt.config),
        "step": ckpt.step,
        "opt_t": ckpt.opt_t,
        "rng": {"scheme": "counter", "seed": ckpt.config.seed, "step": ckpt.step},
        "params": _encode_arrays(ckpt.params),
        "opt_m": _encode_arrays(ckpt.opt_m),
        "opt_v": _encode_arrays(ckpt.opt_v),
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"{path}: not a checkpoint file ({exc})") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointFormatError(f"{path}: missing format_version")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: version {payload['format_version']}, expected {CHECKPOINT_VERSION}")
    try:
        known = {f.name for f in fields(TrainConfig)}
        unknown = set(payload["config"]) - known
        if unknown:
            raise CheckpointFormatError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg = TrainConfig(**payload["config"])
        return Checkpoint(
            version=payload["format_version"],
            config=cfg,
            params=_decode_arrays(payload["params"]),
            opt_m=_decode_arrays(payload["opt_m"]),
            opt_v=_decode_arrays(payload["opt_v"]),
            opt_t=payload["opt_t"],
            step=payload["step"],
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: truncated or malformed ({exc})") from exc
