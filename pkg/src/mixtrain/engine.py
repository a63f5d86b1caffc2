"""Trainers: the supervised baseline, the two-stage baseline, and the
three-phase merged schedule, with exact pass accounting.

The merged step runs the backbone forward exactly once per batch; the
features fan out to the reconstruction head (fresh mask plan per batch) and
to the classification head(s), and a single backbone backward accumulates
both heads' gradients in a fixed order (reconstruction contribution first,
then classification heads in task order). ``head_parallel`` mode runs the
two head branches on separate threads with the same fixed reduction order,
so it is bit-identical to the serial step.

Randomness discipline: one root seed fans out to named child streams
(init, subsample, mixpair, maskplan, shuffle, augment), each keyed
statelessly by the global epoch index, so a merged schedule with rho=0
consumes randomness identically to the two-stage baseline.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional

import numpy as np

from . import data as D
from . import metrics_io
from . import nn
from . import tensor as T
from .nn import BackboneConfig, MaskPlan, MixModel, make_mask_plan
from .schedule import (AdamW, ConfigError, NonFiniteGradient, TrainConfig,
                       lr_at, plan)
from .tensor import GradientTape, Tensor, backward, backward_from


class TrainingAbort(RuntimeError):
    """Training stopped mid-run; the message carries the epoch index."""


# ---------------------------------------------------------------------------
# seeded stream fan-out
# ---------------------------------------------------------------------------

STREAMS = {"init": 0, "subsample": 1, "mixpair": 2, "maskplan": 3,
           "shuffle": 4, "augment": 5}


def stream_seed(root: int, stream: str, *key: int) -> int:
    ss = np.random.SeedSequence([root, STREAMS[stream], *key])
    return int(ss.generate_state(1, np.uint64)[0])


def stream_rng(root: int, stream: str, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence([root, STREAMS[stream], *key])
    return np.random.Generator(np.random.PCG64(ss))


def rng_stream_states(root: int, next_global_epoch: int) -> dict[str, bytes]:
    """Opaque per-stream state tags for checkpoints: (root, stream id, next epoch)."""
    return {name: struct.pack("<QII", root, sid, next_global_epoch)
            for name, sid in STREAMS.items()}


# ---------------------------------------------------------------------------
# ledgers and results
# ---------------------------------------------------------------------------

@dataclass
class FlopLedger:
    """Training pass counters in sample-passes, plus a MAC total.

    Evaluation passes are not counted here (they would obscure the
    per-schedule pass identities); wall clock covers the whole run.
    """
    backbone_fwd: int = 0
    backbone_bwd: int = 0
    ssl_head_fwd: int = 0
    ssl_head_bwd: int = 0
    sl_head_fwd: int = 0
    sl_head_bwd: int = 0
    mac_total: int = 0
    wall_clock_s: float = 0.0

    def count(self, *, backbone: int = 0, ssl_head: int = 0, sl_head: int = 0,
              macs: int = 0) -> None:
        self.backbone_fwd += backbone
        self.backbone_bwd += backbone
        self.ssl_head_fwd += ssl_head
        self.ssl_head_bwd += ssl_head
        self.sl_head_fwd += sl_head
        self.sl_head_bwd += sl_head
        self.mac_total += macs

    def snapshot(self) -> dict:
        return {"backbone_fwd": self.backbone_fwd, "backbone_bwd": self.backbone_bwd,
                "ssl_head_fwd": self.ssl_head_fwd, "ssl_head_bwd": self.ssl_head_bwd,
                "sl_head_fwd": self.sl_head_fwd, "sl_head_bwd": self.sl_head_bwd,
                "mac_total": self.mac_total, "wall_clock_s": self.wall_clock_s}


@dataclass
class LossTerms:
    l_ssl: Optional[float]
    l_sl: Optional[float]
    joint: float


@dataclass
class EpochRecord:
    phase: str
    epoch_in_phase: int
    global_epoch: int
    lr: float
    l_ssl: Optional[float]
    l_sl: Optional[float]
    joint: float
    acc: dict[int, float]
    recon_mse: float
    ledger: dict
    timestamp: float

    def to_json(self, run_id: str, method: str) -> dict:
        return {"run_id": run_id, "method": method, "phase": self.phase,
                "epoch": self.epoch_in_phase, "global_epoch": self.global_epoch,
                "lr": self.lr, "l_ssl": self.l_ssl, "l_sl": self.l_sl,
                "joint": self.joint, "acc": {str(k): v for k, v in self.acc.items()},
                "recon_mse": self.recon_mse, "ledger": self.ledger,
                "timestamp": self.timestamp}


@dataclass
class RunResult:
    method: str
    seed: int
    records: list[EpochRecord]
    final_acc: dict[int, float]
    final_recon_mse: float
    ledger: FlopLedger
    wall_clock_s: float
    config: TrainConfig

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.final_acc.values())))


# ---------------------------------------------------------------------------
# data bundles
# ---------------------------------------------------------------------------

@dataclass
class TaskData:
    task_id: int
    train: D.Dataset
    val: D.Dataset


@dataclass
class RunData:
    tasks: list[TaskData]
    ssl_pool: D.Dataset
    mix_sources: dict[int, D.Dataset]

    @property
    def task_classes(self) -> dict[int, int]:
        return {t.task_id: t.train.num_classes for t in self.tasks}


def prepare_run_data(cfg: TrainConfig) -> RunData:
    """Load, split, and subsample the datasets a run needs."""
    paths = [p.strip() for p in cfg.data.split(",") if p.strip()]
    if not paths:
        raise ConfigError("no dataset given (config key: data)")
    fmts = [f.strip() for f in cfg.data_format.split(",") if f.strip()]
    if len(fmts) == 1:
        fmts = fmts * len(paths)
    if len(fmts) != len(paths):
        raise ConfigError("data_format must have one entry or one per dataset")

    root = cfg.seed
    tasks = []
    for tid, (path, fmt) in enumerate(zip(paths, fmts)):
        ds = D.load(path, fmt)
        if ds.labels is None:
            raise ConfigError(f"dataset {path!r} has no labels; every method "
                              "ends with a supervised phase")
        if ds.item_shape != (cfg.channels, cfg.height, cfg.width):
            raise ConfigError(f"dataset {path!r} items are {ds.item_shape}, model "
                              f"expects {(cfg.channels, cfg.height, cfg.width)}")
        train, val = D.split_train_val(ds, cfg.val_fraction,
                                       stream_seed(root, "subsample", 0, tid))
        if cfg.p < 1.0:
            train = D.subsample(train, cfg.p, stream_seed(root, "subsample", 1, tid))
        tasks.append(TaskData(task_id=tid, train=train, val=val))

    if cfg.ssl_data:
        pool = D.load(cfg.ssl_data, cfg.ssl_data_format or fmts[0])
        if pool.item_shape != tasks[0].train.item_shape:
            raise ConfigError("ssl_data item shape does not match the task datasets")
        mix_sources = {t.task_id: pool for t in tasks}
    elif len(tasks) == 1:
        pool = tasks[0].train
        mix_sources = {tasks[0].task_id: pool}
    else:
        feats = np.concatenate([t.train.features for t in tasks])
        pool = D.Dataset(name="sslpool", features=feats, labels=None,
                         num_classes=None, role="ssl")
        mix_sources = {t.task_id: t.train for t in tasks}
    return RunData(tasks=tasks, ssl_pool=pool, mix_sources=mix_sources)


def backbone_config(cfg: TrainConfig) -> BackboneConfig:
    return BackboneConfig(input_height=cfg.height, input_width=cfg.width,
                          channels=cfg.channels, patch_size=cfg.patch_size,
                          embed_dim=cfg.embed_dim, depth=cfg.depth,
                          num_heads=cfg.num_heads, kind=cfg.kind,
                          mlp_ratio=cfg.mlp_ratio, decoder_depth=cfg.decoder_depth)


def build_model(cfg: TrainConfig, rd: RunData) -> MixModel:
    return MixModel(backbone_config(cfg), rd.task_classes, mask_ratio=cfg.mask_ratio,
                    rng=stream_rng(cfg.seed, "init"), dtype=cfg.np_dtype)


# ---------------------------------------------------------------------------
# MAC model
# ---------------------------------------------------------------------------

def _block_fwd_macs(bc: BackboneConfig) -> int:
    t, e = bc.tokens, bc.embed_dim
    mlp = 2 * t * e * (bc.mlp_ratio * e)
    if bc.kind == "transformer":
        return 4 * t * e * e + 2 * t * t * e + mlp
    return mlp


def backbone_fwd_macs(bc: BackboneConfig) -> int:
    """Per-sample multiply-accumulates of one full encoder forward."""
    return bc.tokens * bc.patch_dim * bc.embed_dim + bc.depth * _block_fwd_macs(bc)


def recon_head_fwd_macs(bc: BackboneConfig) -> int:
    return bc.decoder_depth * _block_fwd_macs(bc) + bc.tokens * bc.embed_dim * bc.patch_dim


def cls_head_fwd_macs(bc: BackboneConfig, num_classes: int) -> int:
    return bc.embed_dim * num_classes


@dataclass(frozen=True)
class MacCosts:
    backbone: int
    recon: int
    cls: dict[int, int]

    def cls_mean(self) -> float:
        return float(np.mean(list(self.cls.values())))


def mac_costs(bc: BackboneConfig, task_classes: dict[int, int]) -> MacCosts:
    return MacCosts(backbone=backbone_fwd_macs(bc), recon=recon_head_fwd_macs(bc),
                    cls={t: cls_head_fwd_macs(bc, n) for t, n in task_classes.items()})


# a training step costs one forward plus a backward that re-touches every
# matmul twice (dW and dX)
_STEP_FACTOR = 3


def predicted_run_macs(cfg: TrainConfig, rd: RunData) -> int:
    """MAC-model cost of a whole run, including per-epoch evaluation passes."""
    bc = backbone_config(cfg)
    costs = mac_costs(bc, rd.task_classes)
    n_pool = len(rd.ssl_pool)
    sched = plan(cfg)
    eval_macs = sum(len(t.val) * (costs.backbone + costs.recon + costs.cls[t.task_id])
                    for t in rd.tasks)
    total = 0
    for phase, length in sched.phases():
        if phase == "ssl":
            per_epoch = n_pool * _STEP_FACTOR * (costs.backbone + costs.recon)
        elif phase == "sl":
            per_epoch = sum(len(t.train) * _STEP_FACTOR * (costs.backbone + costs.cls[t.task_id])
                            for t in rd.tasks)
        else:
            per_epoch = sum(len(t.train) * _STEP_FACTOR
                            * (costs.backbone + costs.recon + costs.cls[t.task_id])
                            for t in rd.tasks)
        total += length * (per_epoch + eval_macs)
    return total


def predicted_speedup(cfg: TrainConfig, rd: RunData) -> float:
    """MAC-model latency ratio of the two-stage baseline over the merged schedule."""
    base = predicted_run_macs(replace(cfg, method="ssl_sl"), rd)
    merged = predicted_run_macs(replace(cfg, method="mixtraining"), rd)
    return base / merged


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _check_finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise TrainingAbort(f"non-finite {what}: {value}")
    return value


def ssl_step(model: MixModel, x: np.ndarray, mplan: MaskPlan, cfg: TrainConfig,
             ledger: FlopLedger, costs: MacCosts) -> LossTerms:
    tokens = nn.patchify(x, model.cfg)
    with GradientTape():
        feats = model.encode(Tensor(tokens))
        loss = model.reconstruct(feats, mplan, Tensor(tokens), cfg.loss_target)
        backward(loss)
    b = len(x)
    ledger.count(backbone=b, ssl_head=b, macs=b * _STEP_FACTOR * (costs.backbone + costs.recon))
    v = _check_finite(loss.item(), "reconstruction loss")
    return LossTerms(l_ssl=v, l_sl=None, joint=v)


def sl_step(model: MixModel, x: np.ndarray, y: np.ndarray, task_id: int,
            cfg: TrainConfig, ledger: FlopLedger, costs: MacCosts) -> LossTerms:
    tokens = nn.patchify(x, model.cfg)
    with GradientTape():
        feats = model.encode(Tensor(tokens))
        loss = T.softmax_cross_entropy(model.classify(feats, task_id), y)
        backward(loss)
    b = len(x)
    ledger.count(backbone=b, sl_head=b,
                 macs=b * _STEP_FACTOR * (costs.backbone + costs.cls[task_id]))
    v = _check_finite(loss.item(), "classification loss")
    return LossTerms(l_ssl=None, l_sl=v, joint=v)


def _joint_value(l_ssl_arr: np.ndarray, l_sl_arr: np.ndarray, alpha: float) -> float:
    # must mirror the scale/scale/add op sequence of the serial merged step
    dt = l_ssl_arr.dtype.type
    return float(l_ssl_arr * dt(alpha) + l_sl_arr * dt(1.0 - alpha))


def mix_step(model: MixModel, x: np.ndarray, y: np.ndarray, task_id: int,
             alpha: float, mplan: MaskPlan, cfg: TrainConfig,
             ledger: FlopLedger, costs: MacCosts) -> LossTerms:
    """One merged step: one backbone forward, both heads, one backbone backward."""
    tokens = nn.patchify(x, model.cfg)
    with GradientTape():
        feats = model.encode(Tensor(tokens))
        # classification branch is built first so the reverse sweep reaches
        # the reconstruction branch first: its gradient lands on the shared
        # features before the classification contribution is added
        l_sl = T.softmax_cross_entropy(model.classify(feats, task_id), y)
        l_ssl = model.reconstruct(feats, mplan, Tensor(tokens), cfg.loss_target)
        joint = T.add(T.scale(l_ssl, alpha), T.scale(l_sl, 1.0 - alpha))
        backward(joint)
    b = len(x)
    ledger.count(backbone=b, ssl_head=b, sl_head=b,
                 macs=b * _STEP_FACTOR * (costs.backbone + costs.recon + costs.cls[task_id]))
    terms = LossTerms(l_ssl=l_ssl.item(), l_sl=l_sl.item(), joint=joint.item())
    _check_finite(terms.joint, "joint loss")
    return terms


def head_parallel_mix_step(model: MixModel, x: np.ndarray, y: np.ndarray, task_id: int,
                           alpha: float, mplan: MaskPlan, cfg: TrainConfig,
                           ledger: FlopLedger, costs: MacCosts) -> LossTerms:
    """mix_step with the two head branches on separate threads.

    Each branch runs on its own (thread-local) tape seeded with its loss
    weight; the feature gradients are then reduced reconstruction-first and
    the shared backbone tape swept once, so results are bit-identical to the
    serial step.
    """
    tokens = nn.patchify(x, model.cfg)
    main = GradientTape()
    with main:
        feats = model.encode(Tensor(tokens))
    out: dict[str, tuple] = {}
    errs: list[BaseException] = []

    def branch(name: str, fn: Callable[[Tensor], Tensor], seed: float) -> None:
        try:
            with GradientTape():
                f = Tensor(feats.data, requires_grad=True)
                loss = fn(f)
                backward(loss, seed=seed)
            out[name] = (loss.data, f.grad)
        except BaseException as e:  # surfaced after join
            errs.append(e)

    threads = [
        threading.Thread(target=branch, args=(
            "ssl", lambda f: model.reconstruct(f, mplan, Tensor(tokens), cfg.loss_target), alpha)),
        threading.Thread(target=branch, args=(
            "sl", lambda f: T.softmax_cross_entropy(model.classify(f, task_id), y), 1.0 - alpha)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errs:
        raise errs[0]

    g = out["ssl"][1].copy()
    g += out["sl"][1]
    backward_from(feats, g)

    b = len(x)
    ledger.count(backbone=b, ssl_head=b, sl_head=b,
                 macs=b * _STEP_FACTOR * (costs.backbone + costs.recon + costs.cls[task_id]))
    terms = LossTerms(l_ssl=float(out["ssl"][0]), l_sl=float(out["sl"][0]),
                      joint=_joint_value(out["ssl"][0], out["sl"][0], alpha))
    _check_finite(terms.joint, "joint loss")
    return terms


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------

def _prep_batch(x: np.ndarray, aug_rng, cfg: TrainConfig) -> np.ndarray:
    if aug_rng is not None:
        x = D.augment_batch(x, aug_rng, pad=cfg.crop_pad, flip=cfg.flip)
    x = x.astype(cfg.np_dtype, copy=False)
    if cfg.norm_mean != 0.0 or cfg.norm_std != 1.0:
        x = (x - cfg.np_dtype(cfg.norm_mean)) / cfg.np_dtype(cfg.norm_std)
    return x


def round_robin(iters: dict[int, Iterable]):
    """Interleave per-task iterators in task order; exhausted tasks drop out."""
    its = {t: iter(v) for t, v in iters.items()}
    active = sorted(its)
    while active:
        still = []
        for t in active:
            try:
                yield t, next(its[t])
            except StopIteration:
                continue
            still.append(t)
        active = still


class _Mean:
    def __init__(self):
        self.total = 0.0
        self.count = 0

    def add(self, v: Optional[float]) -> None:
        if v is not None:
            self.total += v
            self.count += 1

    def value(self) -> Optional[float]:
        return self.total / self.count if self.count else None


def _train_epoch(phase: str, model: MixModel, rd: RunData, cfg: TrainConfig,
                 opt: AdamW, lr: float, ledger: FlopLedger, costs: MacCosts,
                 gepoch: int) -> tuple[Optional[float], Optional[float]]:
    root = cfg.seed
    tokens = model.cfg.tokens
    m_ssl, m_sl = _Mean(), _Mean()

    def aug(tag: int):
        return stream_rng(root, "augment", gepoch, tag) if cfg.augment else None

    if phase == "ssl":
        rng = aug(0)
        it = D.batches(rd.ssl_pool, cfg.batch_size, stream_seed(root, "shuffle", 0), gepoch)
        for bi, batch in enumerate(it):
            x = _prep_batch(batch.x, rng, cfg)
            mplan = make_mask_plan(tokens, model.mask_ratio,
                                   stream_seed(root, "maskplan", 0, gepoch, bi))
            terms = ssl_step(model, x, mplan, cfg, ledger, costs)
            opt.step(lr)
            model.zero_grads()
            m_ssl.add(terms.l_ssl)
    elif phase == "sl":
        rngs = {t.task_id: aug(t.task_id + 1) for t in rd.tasks}
        its = {t.task_id: D.batches(t.train, cfg.batch_size,
                                    stream_seed(root, "shuffle", t.task_id + 1), gepoch)
               for t in rd.tasks}
        for tid, batch in round_robin(its):
            x = _prep_batch(batch.x, rngs[tid], cfg)
            terms = sl_step(model, x, batch.y, tid, cfg, ledger, costs)
            opt.step(lr)
            model.zero_grads()
            m_sl.add(terms.l_sl)
    elif phase == "mix":
        step_fn = head_parallel_mix_step if cfg.head_parallel else mix_step
        mixed = {t.task_id: D.mix(rd.mix_sources[t.task_id], t.train, cfg.lam,
                                  stream_seed(root, "mixpair", gepoch, t.task_id),
                                  task_id=t.task_id)
                 for t in rd.tasks}
        rngs = {t.task_id: aug(t.task_id + 1) for t in rd.tasks}
        its = {tid: D.batches(mx, cfg.batch_size,
                              stream_seed(root, "shuffle", tid + 1), gepoch)
               for tid, mx in mixed.items()}
        counters = {tid: 0 for tid in its}
        for tid, batch in round_robin(its):
            x = _prep_batch(batch.x, rngs[tid], cfg)
            mplan = make_mask_plan(tokens, model.mask_ratio,
                                   stream_seed(root, "maskplan", 0, gepoch,
                                               counters[tid], tid))
            counters[tid] += 1
            terms = step_fn(model, x, batch.y, tid, cfg.alpha, mplan, cfg, ledger, costs)
            opt.step(lr)
            model.zero_grads()
            m_ssl.add(terms.l_ssl)
            m_sl.add(terms.l_sl)
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    return m_ssl.value(), m_sl.value()


def _eval_chunks(n: int, size: int):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


def evaluate(model: MixModel, rd: RunData, cfg: TrainConfig,
             gepoch: int) -> tuple[dict[int, float], float]:
    """Per-task held-out accuracy plus reconstruction MSE over all patches."""
    eval_plan = make_mask_plan(model.cfg.tokens, model.mask_ratio,
                               stream_seed(cfg.seed, "maskplan", 1, gepoch))
    accs: dict[int, float] = {}
    mse_total, mse_n = 0.0, 0
    for task in rd.tasks:
        correct = 0
        for sel in _eval_chunks(len(task.val), cfg.batch_size):
            x = _prep_batch(task.val.features[sel], None, cfg)
            tokens = nn.patchify(x, model.cfg)
            feats = model.encode(Tensor(tokens))
            logits = model.classify(feats, task.task_id).data
            correct += int((logits.argmax(axis=1) == task.val.labels[sel]).sum())
            loss = model.reconstruct(feats, eval_plan, Tensor(tokens), "all")
            mse_total += loss.item() * len(sel)
            mse_n += len(sel)
        accs[task.task_id] = correct / len(task.val)
    return accs, mse_total / mse_n


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

_PHASE_PARAMS = {
    "ssl": ("backbone.", "recon."),
    "sl": ("backbone.", "cls"),
    "mix": ("backbone.", "recon.", "cls"),
}


def _phase_optimizer(model: MixModel, phase: str, cfg: TrainConfig) -> AdamW:
    params = model.param_subset(_PHASE_PARAMS[phase])
    return AdamW(params, no_decay=model.no_decay & set(params), betas=cfg.betas,
                 eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


def train(method: str, model: MixModel, rd: RunData, cfg: TrainConfig, *,
          out_dir: Optional[str] = None, metrics_path: Optional[str] = None,
          run_id: str = "run", on_epoch: Optional[Callable] = None,
          resume: Optional[metrics_io.CheckpointData] = None) -> RunResult:
    """Run the full phase plan for ``method`` and return per-epoch records."""
    cfg = replace(cfg, method=method)
    cfg.validate()
    sched = plan(cfg)
    ledger = FlopLedger()
    costs = mac_costs(model.cfg, rd.task_classes)
    records: list[EpochRecord] = []
    root = cfg.seed

    start_phase, start_epoch, gepoch = 0, 0, 0
    if resume is not None:
        model.load_state(resume.params)
        start_phase = resume.position["phase_index"]
        start_epoch = resume.position["epoch_in_phase"]
        gepoch = resume.position["global_epoch"]

    def save(path: str, phase_index: int, epoch_in_phase: int, next_gepoch: int,
             opt: AdamW) -> None:
        metrics_io.save_checkpoint(
            path, cfg=cfg, params=model.state_arrays(), moments=opt.state_arrays(),
            steps=opt.steps,
            position={"phase_index": phase_index, "epoch_in_phase": epoch_in_phase,
                      "global_epoch": next_gepoch},
            rng_streams=rng_stream_states(root, next_gepoch))

    t0 = time.perf_counter()
    opt: Optional[AdamW] = None
    last_eval: tuple[dict[int, float], float] = ({t.task_id: 0.0 for t in rd.tasks}, 0.0)
    phases = sched.phases()
    for pi, (phase, plen) in enumerate(phases):
        if pi < start_phase or plen == 0:
            continue
        opt = _phase_optimizer(model, phase, cfg)
        first_epoch = start_epoch if pi == start_phase else 0
        if resume is not None and pi == start_phase and first_epoch > 0:
            opt.load_state(resume.moments, resume.steps)
        for e in range(first_epoch, plen):
            lr = lr_at(phase, e, plen, cfg)
            try:
                l_ssl, l_sl = _train_epoch(phase, model, rd, cfg, opt, lr, ledger,
                                           costs, gepoch)
            except (NonFiniteGradient, TrainingAbort) as err:
                raise TrainingAbort(f"aborted at global epoch {gepoch} ({phase} "
                                    f"epoch {e}): {err}") from err
            accs, recon_mse = evaluate(model, rd, cfg, gepoch)
            last_eval = (accs, recon_mse)
            if phase == "mix":
                joint = cfg.alpha * l_ssl + (1.0 - cfg.alpha) * l_sl
            else:
                joint = l_ssl if phase == "ssl" else l_sl
            ledger.wall_clock_s = time.perf_counter() - t0
            rec = EpochRecord(phase=phase, epoch_in_phase=e, global_epoch=gepoch,
                              lr=lr, l_ssl=l_ssl, l_sl=l_sl, joint=joint, acc=accs,
                              recon_mse=recon_mse, ledger=ledger.snapshot(),
                              timestamp=time.time())
            records.append(rec)
            if metrics_path:
                metrics_io.append_metrics(metrics_path, rec.to_json(run_id, method))
            if on_epoch:
                on_epoch(rec)
            gepoch += 1
            if out_dir and cfg.checkpoint_every and gepoch % cfg.checkpoint_every == 0:
                save(f"{out_dir}/epoch{gepoch:04d}.ckpt", pi, e + 1, gepoch, opt)
    wall = time.perf_counter() - t0
    ledger.wall_clock_s = wall
    if out_dir and opt is not None:
        save(f"{out_dir}/final.ckpt", len(phases) - 1,
             phases[-1][1], gepoch, opt)
    return RunResult(method=method, seed=cfg.seed, records=records,
                     final_acc=last_eval[0], final_recon_mse=last_eval[1],
                     ledger=ledger, wall_clock_s=wall, config=cfg)


def train_multitask(model: MixModel, rd: RunData, cfg: TrainConfig,
                    **kw) -> RunResult:
    """Multi-task entry point; the single-task path is the same loop with T=1."""
    if len(rd.tasks) != len(model.task_classes):
        raise ConfigError(f"{len(model.task_classes)} heads registered for "
                          f"{len(rd.tasks)} task datasets")
    return train(cfg.method, model, rd, cfg, **kw)


def run_training(cfg: TrainConfig, *, out_dir: Optional[str] = None,
                 run_id: str = "run", resume_path: Optional[str] = None,
                 on_epoch: Optional[Callable] = None) -> RunResult:
    """Load data, build the model, and train; the one-call form the CLI uses."""
    cfg.validate()
    rd = prepare_run_data(cfg)
    model = build_model(cfg, rd)
    resume = metrics_io.load_checkpoint(resume_path) if resume_path else None
    metrics_path = f"{out_dir}/metrics.jsonl" if out_dir else None
    return train_multitask(model, rd, cfg, out_dir=out_dir, metrics_path=metrics_path,
                           run_id=run_id, on_epoch=on_epoch, resume=resume)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def benchmark(methods: Iterable[str], cfg: TrainConfig, seeds: Iterable[int] = (1,),
              repeat: int = 1, on_epoch: Optional[Callable] = None) -> list[dict]:
    """Wall-clock and accuracy per method, averaged over seeds and repeats.

    Dataset loading happens outside the timed region; the measured window is
    the training loop itself (batching, augmentation, steps, and per-epoch
    evaluation), which is what :func:`train` times.
    """
    methods = list(methods)
    if len(methods) < 2:
        raise ConfigError("benchmark needs at least two methods (speedup is a ratio)")
    per_method: dict[str, list[RunResult]] = {m: [] for m in methods}
    predicted: dict[str, float] = {}
    for m in methods:
        for seed in seeds:
            run_cfg = replace(cfg, method=m, seed=seed)
            run_cfg.validate()
            rd = prepare_run_data(run_cfg)
            if m == "mixtraining":
                predicted[m] = predicted_speedup(run_cfg, rd)
            for _ in range(max(1, repeat)):
                model = build_model(run_cfg, rd)
                per_method[m].append(train(m, model, rd, run_cfg, on_epoch=on_epoch))
    base_lat = None
    if "ssl_sl" in per_method:
        base_lat = float(np.mean([r.wall_clock_s for r in per_method["ssl_sl"]]))
    rows = []
    for m in methods:
        runs = per_method[m]
        lat = float(np.mean([r.wall_clock_s for r in runs]))
        row = {"method": m,
               "runs": len(runs),
               "latency_s": lat,
               "latency_per_run": [r.wall_clock_s for r in runs],
               "accuracy": float(np.mean([r.mean_accuracy for r in runs])),
               "final_recon_mse": float(np.mean([r.final_recon_mse for r in runs]))}
        if base_lat is not None and m != "ssl_sl":
            row["speedup_vs_ssl_sl"] = base_lat / lat
        if m in predicted:
            row["predicted_speedup"] = predicted[m]
        rows.append(row)
    return rows
