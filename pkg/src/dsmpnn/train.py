"""Distributed training and evaluation loops.

Every rank runs the same program: sample the nodes of one point set with a
shared seed, decompose the sampled domain, build the kernel graph over its
interior and halo nodes, run the hop loop with halo exchange, and
contribute its interior squared error. Gradients are summed across ranks
and every rank applies the same Adam update.
"""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .comm import Channel, Communicator, Tag, WorkerGroup
from .config import TrainConfig
from .darcy import DarcySample, Normalizer, scatter_to_pointset
from .graph import PointSet, build_graph, sample_nodes
from .model import (HopState, ModelParams, forward_hops, gcn_forward, init_gcn_params,
                    init_params, params_from_arrays, save_checkpoint)
from .optim import Adam, NonFiniteGradient, PlateauScheduler, onecycle_lr
from .partition import RankView, decompose

log = logging.getLogger(__name__)

EPOCH_LEVEL = 0xFFFFFFFF  # sample field for once-per-epoch collectives


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


def sampling_seed(cfg: TrainConfig, phase: int, a: int, b: int) -> list[int]:
    """Seed words shared by all ranks; ``phase`` 0 = training, 1 = evaluation."""
    return [cfg.seed_sampling, phase, a, b]


@dataclass
class LocalProblem:
    """One rank's share of one sampled point set."""

    view: RankView
    global_ids: np.ndarray  # node ids into the point set, in local row order
    graph: object
    inputs: np.ndarray
    targets: np.ndarray
    n_centers: int


def prepare_local(ps: PointSet, cfg: TrainConfig, rank: int, n_proc: int, seed_words) -> LocalProblem:
    centers = sample_nodes(ps, cfg.s, seed_words)
    plan = decompose(ps.coords[centers], n_proc, cfg.overlap)
    view = plan.rank_view(rank)
    gids = centers[view.local_ids]
    # halo rows are overwritten by the owners after every hop, so only interior centers need kernels
    graph = build_graph(ps, gids, cfg.r, cfg.n_e, list(seed_words) + [7], n_query=view.n_interior)
    return LocalProblem(view=view, global_ids=gids, graph=graph,
                        inputs=ps.node_inputs()[gids], targets=ps.targets[gids], n_centers=len(centers))


def make_exchanger(comm: Communicator, view: RankView, epoch: int, sample: int):
    """Hop callback that refreshes halo rows; received rows are detached."""
    halo = view.halo_pos

    def exchange(state: HopState) -> HopState:
        lat = comm.halo_exchange(view, state.latent.data, Tag(epoch, sample, state.hop_index, Channel.LATENT))
        latent = ad.overwrite_rows(state.latent, halo, lat[halo])
        decoded = state.decoded
        if decoded is not None:
            dec = comm.halo_exchange(view, decoded.data, Tag(epoch, sample, state.hop_index, Channel.DECODED))
            decoded = ad.overwrite_rows(decoded, halo, dec[halo])
        return HopState(latent, decoded, state.edge_feats, state.hop_index)

    return exchange


def model_forward(cfg: TrainConfig, prob: LocalProblem, params: ModelParams, exchange=None) -> Tensor:
    inputs = Tensor(prob.inputs.astype(cfg.dtype))
    if cfg.model == "gcn":
        return gcn_forward(prob.graph, inputs, params, exchange)
    return forward_hops(prob.graph, inputs, params, cfg.h, exchange)


def distributed_forward(comm: Communicator, cfg: TrainConfig, ps: PointSet, params: ModelParams,
                        seed_words, epoch: int, sample: int, exchange: bool = True):
    prob = prepare_local(ps, cfg, comm.rank, comm.n_proc, seed_words)
    cb = None
    if exchange and comm.n_proc > 1 and not cfg.no_comm:
        cb = make_exchanger(comm, prob.view, epoch, sample)
    return prob, model_forward(cfg, prob, params, cb)


def interior_sse(pred: Tensor, prob: LocalProblem) -> Tensor:
    idx = prob.view.interior_pos
    diff = ad.sub(ad.gather(pred, idx), Tensor(prob.targets[idx].astype(pred.dtype)))
    return ad.tsum(ad.mul(diff, diff))


def loss_and_grad(comm: Communicator, cfg: TrainConfig, ps: PointSet, params: ModelParams,
                  seed_words, epoch: int, sample: int):
    """Forward, global-mean interior MSE, local backward. Returns (global loss, problem, pred)."""
    params.zero_grad()
    with Tape() as tape:
        prob, pred = distributed_forward(comm, cfg, ps, params, seed_words, epoch, sample)
        sse = interior_sse(pred, prob)
        count = prob.view.n_interior * pred.shape[1]
        loss_value, global_count = comm.reduce_loss(float(ad._scalar(sse)), float(count),
                                                    Tag(epoch, sample, 0, Channel.LOSS))
        loss = ad.scale(sse, 1.0 / global_count)
    if not np.isfinite(loss_value):
        raise DivergenceError(f"non-finite loss at epoch {epoch}, sample {sample}")
    if sse.requires_grad:
        tape.backward(loss)
    return loss_value, prob, pred


def params_checksum(params: ModelParams) -> int:
    return zlib.crc32(params.flat_data().tobytes())


@dataclass
class TrainResult:
    params: ModelParams
    metrics: list[dict] = field(default_factory=list)
    normalizer: Normalizer | None = None


def build_params(cfg: TrainConfig, d_in: int = 3, d_e: int = 3, d_out: int = 1) -> ModelParams:
    spec = cfg.model_spec(d_in, d_e, d_out)
    if cfg.model == "gcn":
        return init_gcn_params(spec, cfg.seed_init, cfg.dtype)
    return init_params(spec, cfg.seed_init, cfg.dtype)


def to_pointsets(samples: list[DarcySample], cfg: TrainConfig, norm: Normalizer, phase: int) -> list[PointSet]:
    return [scatter_to_pointset(s, cfg.mode, cfg.scatter_m, [cfg.seed_data, phase, k], norm)
            for k, s in enumerate(samples)]


def _train_worker(comm: Communicator, cfg: TrainConfig, train_ps: list[PointSet], spec, init: dict,
                  metrics_path, ckpt_path):
    params = params_from_arrays(spec, init)
    opt = Adam(params, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    plateau = PlateauScheduler(cfg.lr_max) if cfg.scheduler == "plateau" else None
    n_train = len(train_ps)
    total_steps = cfg.epochs * n_train
    chash = cfg.config_hash()
    metrics = []
    last_good = {k: t.data.copy() for k, t in params.items()}
    step = 0
    sink = open(metrics_path, "a") if (metrics_path and comm.rank == 0) else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            comm.reset_counters()
            order = np.random.default_rng([cfg.seed_data, 11, epoch]).permutation(n_train)
            losses = []
            lr = cfg.lr_max
            for k in order:
                k = int(k)
                lr = (onecycle_lr(step, total_steps, cfg.lr_max) if plateau is None else plateau.lr)
                try:
                    loss_value, _, _ = loss_and_grad(comm, cfg, train_ps[k], params,
                                                     sampling_seed(cfg, 0, epoch, k), epoch, k)
                except DivergenceError as exc:
                    raise DivergenceError(str(exc), last_good) from None
                flat = comm.allreduce_sum(params.flat_grad(), Tag(epoch, k, 0, Channel.GRAD))
                params.set_flat_grad(flat)
                try:
                    opt.step(params, lr)
                except NonFiniteGradient as exc:
                    raise DivergenceError(str(exc), last_good) from None
                if cfg.check_sync and comm.n_proc > 1:
                    sums = np.zeros(comm.n_proc)
                    sums[comm.rank] = params_checksum(params)
                    sums = comm.allreduce_sum(sums, Tag(epoch, k, 0, Channel.CTRL))
                    if not np.all(sums == sums[0]):
                        raise RuntimeError(f"parameters diverged across ranks at epoch {epoch}: {sums}")
                losses.append(loss_value)
                step += 1
            if plateau is not None:
                plateau.step(float(np.mean(losses)))
            halo_bytes = comm.payload_bytes[Channel.LATENT] + comm.payload_bytes[Channel.DECODED]
            sent = comm.allreduce_sum(np.array([comm.bytes_sent, sum(comm.payload_bytes.values()), halo_bytes],
                                               dtype=np.float64), Tag(epoch, EPOCH_LEVEL, 1, Channel.CTRL))
            elapsed = time.perf_counter() - t0
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": float(lr),
                   "s_per_epoch": elapsed, "bytes_sent": int(sent[0]), "payload_bytes": int(sent[1]),
                   "halo_bytes": int(sent[2]),
                   "n_proc": comm.n_proc, "no_comm": cfg.no_comm, "config_hash": chash}
            metrics.append(row)
            last_good = {k: t.data.copy() for k, t in params.items()}
            if sink is not None:
                sink.write(json.dumps(row) + "\n")
                sink.flush()
                if ckpt_path:
                    save_checkpoint(ckpt_path, params)
            if comm.rank == 0:
                log.info("epoch %d loss %.4e lr %.2e %.2fs", epoch, row["train_loss"], lr, elapsed)
    finally:
        if sink is not None:
            sink.close()
    return {k: t.data for k, t in params.items()}, metrics


def train(cfg: TrainConfig, train_samples: list[DarcySample], metrics_path=None, ckpt_path=None,
          params: ModelParams | None = None) -> TrainResult:
    """Train on ``cfg.n_proc`` workers; returns rank 0's (synchronised) parameters."""
    if cfg.max_train:
        train_samples = train_samples[:cfg.max_train]
    norm = Normalizer.fit(train_samples)
    train_ps = to_pointsets(train_samples, cfg, norm, 0)
    if params is None:
        params = build_params(cfg, d_in=train_ps[0].node_inputs().shape[1], d_e=train_ps[0].edge_dim,
                              d_out=train_ps[0].d_out)
    spec = params.spec
    init = {k: t.data.astype(cfg.dtype) for k, t in params.items()}
    if metrics_path:
        Path(metrics_path).write_text("")
    group = WorkerGroup(cfg.n_proc, cfg.transport, cfg.launcher, cfg.timeout)
    results = group.run(_train_worker, cfg, train_ps, spec, init, metrics_path, ckpt_path)
    final, metrics = results[0]
    return TrainResult(params=params_from_arrays(spec, final), metrics=metrics, normalizer=norm)


@dataclass
class EvalResult:
    rmse: list[float]
    fields: list[np.ndarray]
    coverage: list[float]
    seconds: float

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse))


def _eval_worker(comm: Communicator, cfg: TrainConfig, test_ps: list[PointSet], spec, arrays: dict,
                 repeats: int):
    params = params_from_arrays(spec, arrays)
    out = []
    for k, ps in enumerate(test_ps):
        for rep in range(repeats):
            prob, pred = distributed_forward(comm, cfg, ps, params, sampling_seed(cfg, 1, k, rep), rep, k)
            idx = prob.view.interior_pos
            out.append((k, prob.global_ids[idx], pred.data[idx].astype(np.float64)))
    return out


def evaluate(cfg: TrainConfig, params: ModelParams, test_samples: list[DarcySample], norm: Normalizer,
             repeats: int | None = None) -> EvalResult:
    """Repeated-sampling inference with reassembly of per-node predictions.

    Each visit's interior predictions are de-normalised and averaged per
    node; RMSE is taken over nodes visited at least once.
    """
    if cfg.max_test:
        test_samples = test_samples[:cfg.max_test]
    repeats = cfg.eval_repeats if repeats is None else repeats
    test_ps = to_pointsets(test_samples, cfg, norm, 1)
    arrays = {k: t.data.astype(cfg.dtype) for k, t in params.items()}
    t0 = time.perf_counter()
    group = WorkerGroup(cfg.n_proc, cfg.transport, cfg.launcher, cfg.timeout)
    per_rank = group.run(_eval_worker, cfg, test_ps, params.spec, arrays, repeats)
    seconds = time.perf_counter() - t0
    sums = [np.zeros(ps.targets.shape) for ps in test_ps]
    counts = [np.zeros(ps.n_nodes) for ps in test_ps]
    for rank_out in per_rank:
        for k, gids, vals in rank_out:
            np.add.at(sums[k], gids, vals)
            np.add.at(counts[k], gids, 1)
    rmse, fields, coverage = [], [], []
    for k, ps in enumerate(test_ps):
        seen = counts[k] > 0
        pred = np.full(ps.targets.shape, np.nan)
        pred[seen] = norm.denorm_u(sums[k][seen] / counts[k][seen, None])
        truth = norm.denorm_u(ps.targets)
        rmse.append(float(np.sqrt(np.mean((pred[seen] - truth[seen]) ** 2))))
        fields.append(pred)
        coverage.append(float(seen.mean()))
    return EvalResult(rmse=rmse, fields=fields, coverage=coverage, seconds=seconds)


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean((pred - target) ** 2)))
