"""Equivalence checks, ablation grids and the throughput benchmark.

``verify_equivalence`` compares the distributed forward/backward against a
single worker on the same sampled graph; ``ablate`` and ``bench`` drive
full training runs and return rows ready for CSV output.
"""

from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .comm import Channel, Tag, WorkerGroup
from .config import TrainConfig
from .darcy import DarcySample, Normalizer
from .partition import decompose, kernel_completeness_check
from .train import (build_params, distributed_forward, evaluate, loss_and_grad, prepare_local,
                    sampling_seed, to_pointsets, train)
from .model import params_from_arrays


@dataclass
class EquivalenceReport:
    """Worst-case DS-vs-S discrepancies over the checked (n_proc, h) legs."""

    forward_max_abs: float = 0.0
    grad_rel_err: float = 0.0
    complete: bool = True
    legs: list[dict] = field(default_factory=list)

    def summary(self) -> str:
        return (f"forward max |DS-S| = {self.forward_max_abs:.3e}; "
                f"h=1 gradient rel err = {self.grad_rel_err:.3e}; "
                f"kernels complete = {self.complete}")


def _forward_worker(comm, cfg: TrainConfig, ps, spec, arrays, seed_words):
    params = params_from_arrays(spec, arrays)
    prob, pred = distributed_forward(comm, cfg, ps, params, seed_words, 0, 0)
    idx = prob.view.interior_pos
    return prob.global_ids[idx], pred.data[idx].copy()


def _grad_worker(comm, cfg: TrainConfig, ps, spec, arrays, seed_words):
    params = params_from_arrays(spec, arrays)
    loss, _, _ = loss_and_grad(comm, cfg, ps, params, seed_words, 0, 0)
    return loss, comm.allreduce_sum(params.flat_grad(), Tag(0, 0, 0, Channel.GRAD))


def _forward(cfg: TrainConfig, ps, params, seed_words) -> dict[int, np.ndarray]:
    arrays = {k: t.data for k, t in params.items()}
    group = WorkerGroup(cfg.n_proc, cfg.transport, cfg.launcher, cfg.timeout)
    out = {}
    for gids, vals in group.run(_forward_worker, cfg, ps, params.spec, arrays, seed_words):
        for g, v in zip(gids, vals):
            out[int(g)] = v
    return out


def _gradient(cfg: TrainConfig, ps, params, seed_words) -> tuple[float, np.ndarray]:
    arrays = {k: t.data for k, t in params.items()}
    group = WorkerGroup(cfg.n_proc, cfg.transport, cfg.launcher, cfg.timeout)
    return group.run(_grad_worker, cfg, ps, params.spec, arrays, seed_words)[0]


def verify_equivalence(sample: DarcySample, cfg: TrainConfig, n_procs=(2, 4), hops=(1, 2, 4),
                       norm: Normalizer | None = None, seed: int = 0) -> EquivalenceReport:
    """DS-vs-S report on one sample, run in 64-bit.

    (a) max abs difference of interior decoded outputs over all ``n_procs``
    and ``hops``; (b) relative error max|g_DS − g_S| / max|g_S| of the summed
    h=1 gradient; (c) kernel completeness of every partition used.
    """
    base = cfg.replace(precision="f64")
    norm = norm or Normalizer.fit([sample])
    ps = to_pointsets([sample], base, norm, 0)[0]
    params = build_params(base, d_in=ps.node_inputs().shape[1], d_e=ps.edge_dim, d_out=ps.d_out)
    seed_words = sampling_seed(base, 2, seed, 0)
    report = EquivalenceReport()

    full = prepare_local(ps, base.replace(n_proc=1), 0, 1, seed_words)
    edges = np.stack([full.graph.dst, full.graph.src], axis=1)
    for p in n_procs:
        plan = decompose(ps.coords[full.global_ids], p, base.overlap)
        report.complete &= kernel_completeness_check(plan, edges, base.r)

    for h in hops:
        cfg_h = base.replace(h=h, n_proc=1)
        ref = _forward(cfg_h, ps, params, seed_words)
        for p in n_procs:
            got = _forward(cfg_h.replace(n_proc=p), ps, params, seed_words)
            if sorted(got) != sorted(ref):
                raise AssertionError(f"n_proc={p}: interior union differs from the sampled set")
            diff = max(float(np.max(np.abs(got[g] - ref[g]))) for g in ref)
            report.legs.append({"h": h, "n_proc": p, "forward_max_abs": diff})
            report.forward_max_abs = max(report.forward_max_abs, diff)

    if 1 in hops:
        cfg_1 = base.replace(h=1, n_proc=1)
        loss_s, g_s = _gradient(cfg_1, ps, params, seed_words)
        scale = max(float(np.max(np.abs(g_s))), 1e-300)
        for p in n_procs:
            loss_d, g_d = _gradient(cfg_1.replace(n_proc=p), ps, params, seed_words)
            err = float(np.max(np.abs(g_d - g_s))) / scale
            report.legs.append({"h": 1, "n_proc": p, "grad_rel_err": err,
                                "loss_abs_diff": abs(loss_d - loss_s)})
            report.grad_rel_err = max(report.grad_rel_err, err)
    return report


# ablation ---------------------------------------------------------------------

ABLATION_FIELDS = ["label", "h", "r", "n_e", "s", "l", "n_proc", "model", "no_comm", "epochs",
                   "final_train_loss", "test_rmse", "s_per_epoch", "bytes_per_epoch", "infer_seconds",
                   "config_hash"]


def run_point(cfg: TrainConfig, train_samples, test_samples, label: str = "",
              metrics_path=None, ckpt_path=None) -> dict:
    """Train and evaluate one configuration; returns one results row."""
    res = train(cfg, train_samples, metrics_path=metrics_path, ckpt_path=ckpt_path)
    ev = evaluate(cfg, res.params, test_samples, res.normalizer)
    m = res.metrics
    return {
        "label": label, "h": cfg.h, "r": cfg.r, "n_e": cfg.n_e, "s": cfg.s, "l": cfg.overlap,
        "n_proc": cfg.n_proc, "model": cfg.model, "no_comm": cfg.no_comm, "epochs": cfg.epochs,
        "final_train_loss": m[-1]["train_loss"], "test_rmse": ev.mean_rmse,
        "s_per_epoch": float(np.mean([row["s_per_epoch"] for row in m])),
        "bytes_per_epoch": float(np.mean([row["bytes_sent"] for row in m])),
        "infer_seconds": ev.seconds, "config_hash": cfg.config_hash(),
    }


def grid_points(base: TrainConfig, grid: dict[str, list], mode: str = "oat") -> list[tuple[str, TrainConfig]]:
    """Expand ``grid`` around ``base``.

    ``oat`` varies one key at a time (the base point is included once);
    ``full`` takes the Cartesian product.
    """
    if mode not in ("oat", "full"):
        raise ValueError(f"unknown grid mode {mode!r}")
    points: list[tuple[str, TrainConfig]] = []
    seen = set()

    def add(label, changes):
        cfg = base.replace(**changes)
        key = cfg.config_hash()
        if key not in seen:
            seen.add(key)
            points.append((label, cfg))

    if mode == "full":
        keys = list(grid)
        for combo in itertools.product(*(grid[k] for k in keys)):
            changes = dict(zip(keys, combo))
            add(",".join(f"{k}={v}" for k, v in changes.items()), changes)
    else:
        add("base", {})
        for key, values in grid.items():
            for v in values:
                add(f"{key}={v}", {key: v})
    return points


def ablate(base: TrainConfig, grid: dict[str, list], train_samples, test_samples, mode: str = "oat",
           out_csv=None, log=print) -> list[dict]:
    rows = []
    for label, cfg in grid_points(base, grid, mode):
        row = run_point(cfg, train_samples, test_samples, label)
        log(f"{label}: test RMSE {row['test_rmse']:.4e}, {row['s_per_epoch']:.2f} s/epoch")
        rows.append(row)
    if out_csv:
        write_csv(out_csv, rows, ABLATION_FIELDS)
    return rows


def write_csv(path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)


# benchmark --------------------------------------------------------------------

BENCH_FIELDS = ["n_proc", "s", "s_per_epoch", "infer_seconds", "bytes_per_epoch", "halo_bytes_per_epoch",
                "halo_nodes_per_epoch", "bytes_per_halo_node"]


def halo_size(ps, cfg: TrainConfig, seed_words) -> int:
    """Total halo rows across ranks for one sampled point set."""
    from .graph import sample_nodes
    centers = sample_nodes(ps, cfg.s, seed_words)
    return decompose(ps.coords[centers], cfg.n_proc, cfg.overlap).halo_count()


def bench(base: TrainConfig, train_samples, test_samples, n_procs=(1, 2, 4), s_grid=(256,),
          log=print) -> list[dict]:
    """Train/inference timing and traffic over ``n_procs`` × ``s_grid``.

    ``halo_bytes_per_epoch`` counts the latent and decoded exchange payload;
    ``halo_nodes_per_epoch`` is the summed halo size of every step's plan.
    """
    rows = []
    norm = Normalizer.fit(train_samples)
    for s in s_grid:
        for p in n_procs:
            cfg = base.replace(s=s, n_proc=p)
            t0 = time.perf_counter()
            res = train(cfg, train_samples)
            ev = evaluate(cfg, res.params, test_samples, res.normalizer)
            ps_list = to_pointsets(train_samples, cfg, norm, 0)
            halo = sum(halo_size(ps, cfg, sampling_seed(cfg, 0, e, k))
                       for e in range(cfg.epochs) for k, ps in enumerate(ps_list)) / cfg.epochs
            halo_bytes = float(np.mean([m["halo_bytes"] for m in res.metrics]))
            row = {
                "n_proc": p, "s": s,
                "s_per_epoch": float(np.mean([m["s_per_epoch"] for m in res.metrics])),
                "infer_seconds": ev.seconds,
                "bytes_per_epoch": float(np.mean([m["bytes_sent"] for m in res.metrics])),
                "halo_bytes_per_epoch": halo_bytes,
                "halo_nodes_per_epoch": halo,
                "bytes_per_halo_node": halo_bytes / halo if halo else 0.0,
            }
            log(f"n_proc={p} s={s}: {row['s_per_epoch']:.2f} s/epoch, {row['bytes_per_epoch']:.0f} B/epoch, "
                f"{halo:.0f} halo rows/epoch ({time.perf_counter() - t0:.1f}s)")
            rows.append(row)
    return rows
