"""Experiment runners.

Each runner takes a config object from :mod:`svflow.experiments.config` and
returns a :class:`RunResult` holding the output files (name -> text), a
summary dict and the outcome of the reference-run targets.  Runners embed
oracle checks (gradient, bound or identity) and raise OracleFailure when one
breaks.  Writing to disk is left to the caller so that runs stay pure and
byte-reproducible under a fixed seed.
"""

import csv
import io
import json
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import flow, train
from ..attention import (AttentionHead, GaussianKeys, MhaLayer, ToyTransformer, head_vmf_terms,
                         kernel_limit_errors, kernel_smoothed_expectation, mha_forward, window_keys)
from ..data import IGNORE, make_moons, make_sequence_task, make_spherical_clusters, prefix_shuffle
from ..distributions import categorical_kl_logits
from ..geometry import loglog_slope
from ..metrics import (METRIC_NAMES, SCHEMA_HEADER, TokenMetrics, aggregate_deep, calibration_report,
                       deep_layer_count, mean_metrics, metrics_csv, position_bins, svflow_metrics)
from .config import Toy2dConfig, parse_beta

GRAD_TOL = 1e-5
KERNEL_TOL = 1e-10
BOUND_TOL = 1e-9
NUM_BINS = 4


class OracleFailure(RuntimeError):
    """An embedded correctness check failed during a run."""


@dataclass
class RunResult:
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        for name, text in sorted(self.files.items()):
            path = os.path.join(out_dir, name)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            with open(path, "w", newline="") as fh:
                fh.write(text)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def thread_limit():
    """Worker cap from SVFLOW_THREADS (default: all cores)."""
    raw = os.environ.get("SVFLOW_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SVFLOW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"SVFLOW_THREADS must be a positive integer, got {raw!r}")
    return n


def map_cells(fn, cells, threads=None):
    """fn over independent cells, in order; a spawn pool when more than one worker is allowed."""
    threads = thread_limit() if threads is None else threads
    workers = min(threads, len(cells))
    if workers <= 1:
        return [fn(c) for c in cells]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(fn, cells))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return v


def csv_text(columns, rows):
    buf = io.StringIO()
    buf.write(SCHEMA_HEADER + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def json_text(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _beta_label(beta):
    return "inf" if math.isinf(beta) else repr(float(beta))


def _require(ok, message):
    if not ok:
        raise OracleFailure(message)


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"{name} is not finite")


def _kernel_vs_numpy(model, head, x, y, obj):
    """Max over blocks of |fast - ref| / max(|ref|, 1) between compiled and reference gradients.

    The floor of 1 (the scale of the objective) keeps the comparison
    meaningful once a converged run drives a block's gradient to ~1e-9,
    where a purely relative error only measures rounding.
    """
    from .._kernels import GradientKernel

    ref = train.gradients(model, head, x, y, obj).flat()
    fast = GradientKernel(model, obj).gradients(model, head, x, y).flat()
    return max(float(np.linalg.norm(fast[k] - ref[k]) / max(np.linalg.norm(ref[k]), 1.0)) for k in ref)


def _bound_gap(model, step, x):
    """max(elbo - marginal); must stay <= BOUND_TOL."""
    return float(np.max(flow.elbo(model, step, x) - flow.marginal_log_density(model, step, x)))


# ---------------------------------------------------------------------------
# 2-D Gaussian flow on two moons
# ---------------------------------------------------------------------------


def _toy2d_train_config(cfg, beta):
    return train.TrainConfig(
        family="gaussian", dim=2, num_components=cfg.num_components, num_steps=cfg.num_steps,
        step_size=cfg.step_size, posterior_mode=cfg.posterior_mode, num_classes=2, beta=beta,
        mode="euclidean", batch_size=cfg.batch_size, iterations=cfg.iterations, lr=cfg.lr,
        seed=cfg.seed, log_every=cfg.log_every, init_mean_scale=cfg.init_mean_scale,
        init_logit_scale=cfg.init_logit_scale)


def _step_index(t, h, num_steps):
    """State index for time t (0..L)."""
    i = int(round(t / h))
    if not 0 <= i <= num_steps:
        raise ValueError(f"time {t} lies outside [0, {num_steps * h}]")
    return i


def toy2d_cell(args):
    """Train one beta cell and emit its files.  ``args`` = (config dict, beta)."""
    cfg_dict, beta_raw = args
    cfg = Toy2dConfig(**cfg_dict)
    beta = parse_beta(beta_raw)
    label = _beta_label(beta)
    data = make_moons(cfg.n_train, cfg.noise, seed=cfg.seed)
    ev = make_moons(cfg.n_eval, cfg.noise, seed=cfg.seed + 1)
    tc = _toy2d_train_config(cfg, beta)
    model, head, hist = train.train_run(tc, data.points, data.labels, ev.points, ev.labels)
    obj = train.ObjectiveConfig(beta=beta, mode="euclidean")
    files = {f"toy2d/beta_{label}/history.csv": hist.to_csv()}

    final = train.evaluate(model, head, ev.points, ev.labels, obj)
    _check_finite("final objective", final["j_hybrid"])
    states = final["cache"].states
    h = cfg.step_size
    times = [0.0] + list(cfg.snapshot_times)

    P = min(cfg.snapshot_points, len(ev))
    rows = []
    for t in times:
        X = states[_step_index(t, h, cfg.num_steps)]
        for i in range(P):
            rows.append([repr(t), i, int(ev.labels[i]), X[i, 0], X[i, 1]])
    files[f"toy2d/beta_{label}/snapshots.csv"] = csv_text(["t", "point", "label", "x0", "x1"], rows)

    x0, x1, y0, y1 = cfg.grid_bounds
    gx, gy = np.meshgrid(np.linspace(x0, x1, cfg.grid_size), np.linspace(y0, y1, cfg.grid_size),
                         indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    grid_rows, field_rows = [], []
    worst_gap = -np.inf
    for t in times:
        step = min(_step_index(t, h, cfg.num_steps), cfg.num_steps - 1)
        terms = flow.step_terms(model, step, pts)
        el = flow.elbo(model, step, pts)
        marg = flow.marginal_log_density(model, step, pts)
        kl = categorical_kl_logits(terms.log_q, terms.log_p)
        v = flow.vector_field(model, step, pts)
        worst_gap = max(worst_gap, float(np.max(el - marg)))
        for j in range(len(pts)):
            grid_rows.append([repr(t), pts[j, 0], pts[j, 1], el[j], marg[j], kl[j]])
            field_rows.append([repr(t), pts[j, 0], pts[j, 1], v[j, 0], v[j, 1]])
    _require(worst_gap <= BOUND_TOL, f"beta={label}: ELBO exceeds log p(x) by {worst_gap!r} on the grid")
    files[f"toy2d/beta_{label}/elbo_grid.csv"] = csv_text(["t", "x0", "x1", "elbo", "log_marginal", "kl_qp"],
                                                          grid_rows)
    files[f"toy2d/beta_{label}/field_grid.csv"] = csv_text(["t", "x0", "x1", "v0", "v1"], field_rows)

    kerr = _kernel_vs_numpy(model, head, ev.points[:64], ev.labels[:64], obj)
    _require(kerr <= KERNEL_TOL, f"beta={label}: compiled gradients differ from reference by {kerr!r}")

    kl_steps = train.step_kl(final["cache"])  # (L, B)
    summary = {
        "beta": label,
        "accuracy": final["accuracy"],
        "j_align": final["j_align"],
        "j_var": final["j_var"],
        "mean_trajectory_kl": float(np.mean(kl_steps)),
        "max_component_usage": float(final["usage"].max()),
        "component_usage": final["usage"].tolist(),
        "bound_gap_max": worst_gap,
        "kernel_rel_err": kerr,
    }
    files[f"toy2d/beta_{label}/summary.json"] = json_text(summary)
    return files, summary


def run_toy2d(cfg, threads=None):
    cells = [(asdict(cfg), b) for b in cfg.betas]
    results = map_cells(toy2d_cell, cells, threads)
    out = RunResult()
    cells_summary = []
    for files, summary in results:
        out.files.update(files)
        cells_summary.append(summary)
    by_beta = {s["beta"]: s for s in cells_summary}
    targets = {}
    if "inf" in by_beta:
        targets["var_only_collapse"] = by_beta["inf"]["max_component_usage"] >= 0.99
    if "0.0" in by_beta:
        targets["beta0_accuracy"] = by_beta["0.0"]["accuracy"] >= 0.95
    order = [b for b in ("0.0", "0.1", "0.5") if b in by_beta]
    if len(order) == 3:
        kls = [by_beta[b]["mean_trajectory_kl"] for b in order]
        targets["kl_ordering"] = kls[0] > kls[1] > kls[2]
    out.targets = targets
    out.summary = {"experiment": "toy2d", "seed": cfg.seed, "cells": cells_summary, "targets": targets}
    out.files["toy2d/summary.json"] = json_text(out.summary)
    return out


# ---------------------------------------------------------------------------
# spherical vMF flow
# ---------------------------------------------------------------------------


def _subset_gradcheck(model, head, x, y, obj, coords, rng, fd_step=1e-5):
    """Relative error of analytic vs central-difference gradients on random coordinates."""
    params = dict(model.params())
    params.update(head.params())
    grads = train.gradients(model, head, x, y, obj).flat()
    keys = sorted(params)
    picks = []
    for _ in range(coords):
        k = keys[rng.integers(len(keys))]
        picks.append((k, int(rng.integers(params[k].size))))
    an, fd = [], []
    for k, i in picks:
        flat = params[k].reshape(-1)
        old = flat[i]
        flat[i] = old + fd_step
        up = train.j_hybrid(model, head, x, y, obj)
        flat[i] = old - fd_step
        down = train.j_hybrid(model, head, x, y, obj)
        flat[i] = old
        fd.append((up - down) / (2.0 * fd_step))
        an.append(grads[k].reshape(-1)[i])
    return train.relative_error(np.array(an), np.array(fd))


def run_vmf_flow(cfg):
    data, centers = make_spherical_clusters(cfg.n_train, cfg.dim, cfg.num_clusters, cfg.kappa_data, cfg.seed)
    ev, _ = make_spherical_clusters(cfg.n_eval, cfg.dim, cfg.num_clusters, cfg.kappa_data, cfg.seed + 1,
                                    centers=centers)
    beta = parse_beta(cfg.beta) if isinstance(cfg.beta, str) else cfg.beta
    tc = train.TrainConfig(
        family="vmf", dim=cfg.dim, num_components=cfg.num_components, num_steps=cfg.num_steps,
        step_size=cfg.step_size, posterior_mode=cfg.posterior_mode, num_classes=cfg.num_clusters,
        beta=beta, mode=cfg.mode, batch_size=cfg.batch_size, iterations=cfg.iterations, lr=cfg.lr,
        seed=cfg.seed, log_every=cfg.log_every)
    obj = train.ObjectiveConfig(beta=beta, mode=cfg.mode)
    mid = (cfg.iterations // 2) // cfg.log_every * cfg.log_every
    checkpoints = sorted({0, mid, cfg.iterations})
    rng = np.random.default_rng([cfg.seed, 1])
    xg, yg = ev.points[:cfg.gradcheck_batch], ev.labels[:cfg.gradcheck_batch]
    checks = []

    def on_log(it, model, head, row):
        if it not in checkpoints:
            return
        fd_err = _subset_gradcheck(model, head, xg, yg, obj, cfg.gradcheck_coords, rng)
        kerr = _kernel_vs_numpy(model, head, xg, yg, obj)
        cache = train.forward(model, ev.points, cfg.mode)
        norm_err = float(np.max(np.abs(np.linalg.norm(cache.states, axis=-1) - 1.0)))
        gap = max(_bound_gap(model, s, cache.states[s]) for s in range(cfg.num_steps))
        checks.append({"iteration": it, "fd_rel_err": fd_err, "kernel_rel_err": kerr,
                       "unit_norm_err": norm_err, "bound_gap_max": gap})
        _require(fd_err <= GRAD_TOL, f"iteration {it}: gradient vs finite differences rel err {fd_err!r}")
        _require(kerr <= KERNEL_TOL, f"iteration {it}: compiled gradients differ by {kerr!r}")
        if cfg.mode != "euclidean":
            _require(norm_err <= 1e-12, f"iteration {it}: states left the sphere by {norm_err!r}")
        _require(gap <= BOUND_TOL, f"iteration {it}: ELBO exceeds log p(x) by {gap!r}")

    model, head, hist = train.train_run(tc, data.points, data.labels, ev.points, ev.labels, callback=on_log)
    final = hist.rows[-1]
    _check_finite("final objective", final["j_hybrid"])
    out = RunResult()
    out.files["vmf/history.csv"] = hist.to_csv()
    cols = ["iteration", "fd_rel_err", "kernel_rel_err", "unit_norm_err", "bound_gap_max"]
    out.files["vmf/checks.csv"] = csv_text(cols, [[c[k] for k in cols] for c in checks])
    out.files["vmf/model.json"] = model.to_json(sort_keys=True) + "\n"
    out.targets = {"accuracy": final["accuracy"] >= 0.9,
                   "gradient_checks": len(checks) == len(checkpoints)}
    out.summary = {"experiment": "vmf", "seed": cfg.seed, "accuracy": final["accuracy"],
                   "j_align": final["j_align"], "j_var": final["j_var"],
                   "max_component_usage": final["max_component_usage"], "checks": checks,
                   "targets": out.targets}
    out.files["vmf/summary.json"] = json_text(out.summary)
    return out


# ---------------------------------------------------------------------------
# coupled vs decoupled routing
# ---------------------------------------------------------------------------


def _sequence_corpora(cfg):
    corpus = make_sequence_task(cfg.vocab, cfg.length, cfg.dim, seed=cfg.seed,
                                num_sequences=cfg.num_sequences, window=cfg.window)
    ev = make_sequence_task(cfg.vocab, cfg.length, cfg.dim, seed=cfg.seed + 1,
                            num_sequences=cfg.eval_sequences, window=cfg.window,
                            embedding_table=corpus.embedding_table)
    return corpus, ev


def _torch_vs_numpy(model, corpus, count=4):
    """Max abs difference between the torch training forward and the numpy forward."""
    from ..toytrain import TorchToy

    emb = np.stack([s.embeddings for s in corpus.sequences[:count]])
    logits, _, _ = TorchToy(model).forward(emb)
    return float(np.max(np.abs(logits.detach().numpy() - model.forward(emb).logits)))


def _literal_vs_svflow(model, corpus, queries=16):
    """Max abs difference between the two MHA forms on states of the first attention layer."""
    layer_idx = next(i for i, l in enumerate(model.layers) if isinstance(l, MhaLayer))
    layer = model.layers[layer_idx]
    emb = np.stack([s.embeddings for s in corpus.sequences[:1]])
    X = model.forward(emb).states[layer_idx]
    K, _ = window_keys(X, model.window)
    worst = 0.0
    for n in range(model.window, min(model.window + queries, X.shape[1])):
        a = mha_forward(layer, X[0, n], K[0, n], K[0, n], "literal")
        b = mha_forward(layer, X[0, n], K[0, n], K[0, n], "svflow")
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def coupling_cell(args):
    from ..toytrain import ToyTrainConfig, train_toy

    cfg, name, kinds, balance = args
    import torch

    torch.set_num_threads(1)
    corpus, ev = _sequence_corpora(cfg)
    model = ToyTransformer.random(np.random.default_rng(cfg.seed), cfg.dim, cfg.vocab, cfg.window, kinds,
                                  cfg.num_heads, cfg.num_experts)
    tcfg = ToyTrainConfig(steps=cfg.steps, batch=cfg.batch, lr=cfg.lr, balance_weight=balance,
                          seed=cfg.seed, log_every=cfg.log_every)
    trained, trace = train_toy(model, corpus, tcfg, ev)
    return name, trained, trace.rows, _torch_vs_numpy(trained, ev), _literal_vs_svflow(trained, ev)


def run_coupling_contrast(cfg, threads=None):
    if cfg.num_layers < 2 or cfg.num_layers % 2:
        raise ValueError("coupling contrast needs an even number of layers >= 2")
    routing_layers = list(range(1, cfg.num_layers, 2))
    decoupled = ["mha", "moe"] * (cfg.num_layers // 2)
    variants = [("coupled", ["mha"] * cfg.num_layers, 0.0), ("decoupled", decoupled, 0.0),
                ("decoupled_balanced", decoupled, cfg.balance_weight)]
    results = map_cells(coupling_cell, [(cfg, n, k, b) for n, k, b in variants], threads)
    out = RunResult()
    trace_rows, final = [], {}
    for name, trained, rows, torch_err, form_err in results:
        _require(torch_err <= 1e-10, f"{name}: torch and numpy forwards differ by {torch_err!r}")
        _require(form_err <= 1e-12, f"{name}: literal and svflow attention differ by {form_err!r}")
        for r in rows:
            conc = float(np.mean([r[f"concentration_{i}"] for i in routing_layers]))
            trace_rows.append([name, r["step"], r["loss"], r["accuracy"], conc]
                              + [r[f"concentration_{i}"] for i in range(cfg.num_layers)])
        last = rows[-1]
        final[name] = {"accuracy": last["accuracy"], "loss": last["loss"],
                       "concentration": float(np.mean([last[f"concentration_{i}"] for i in routing_layers])),
                       "torch_numpy_err": torch_err, "form_err": form_err}
        out.files[f"coupling/{name}_model.json"] = json.dumps(trained.to_dict(), sort_keys=True) + "\n"
    cols = ["variant", "step", "loss", "accuracy", "routing_concentration"] + [
        f"concentration_{i}" for i in range(cfg.num_layers)]
    out.files["coupling/trace.csv"] = csv_text(cols, trace_rows)
    c, d, db = final["coupled"], final["decoupled"], final["decoupled_balanced"]
    out.targets = {
        "decoupled_more_concentrated": d["concentration"] > c["concentration"],
        "balance_reduces_concentration": db["concentration"] < d["concentration"],
        "coupled_accuracy_within_2pct": c["accuracy"] >= db["accuracy"] - 0.02,
    }
    out.summary = {"experiment": "coupling", "seed": cfg.seed, "routing_layers": routing_layers,
                   "variants": final, "targets": out.targets}
    out.files["coupling/summary.json"] = json_text(out.summary)
    return out


# ---------------------------------------------------------------------------
# prefix-shuffle probe
# ---------------------------------------------------------------------------


def layer_token_metrics(model, rec):
    """Per-layer head-averaged SVFlow metrics at positions with a full key window.

    Returns a dict metric -> array (num_layers, S, N - window).
    """
    W = model.window
    out = {name: [] for name in METRIC_NAMES}
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, MhaLayer):
            raise ValueError("the shuffle probe expects attention-only models")
        per_head = {name: [] for name in METRIC_NAMES}
        for h in layer.heads:
            q, cond, _ = head_vmf_terms(h, rec.states[i], W)
            m = svflow_metrics(q[:, W:], cond[:, W:], model.dim)
            for name in METRIC_NAMES:
                per_head[name].append(np.asarray(getattr(m, name)))
        for name in METRIC_NAMES:
            out[name].append(np.mean(per_head[name], axis=0))
    return {name: np.stack(v) for name, v in out.items()}


def _token_nll(probs, targets):
    p_true = np.take_along_axis(probs, np.maximum(targets, 0)[..., None], axis=-1)[..., 0]
    return -np.log(np.maximum(p_true, np.finfo(float).tiny))


def run_shuffle_probe(cfg, model=None):
    """Baseline vs prefix-shuffled inputs over the proportion grid.

    Trains an attention-only toy transformer unless ``model`` is given.
    """
    from ..toytrain import ToyTrainConfig, train_toy, evaluate_toy

    corpus, ev = _sequence_corpora(cfg)
    if model is None:
        import torch

        torch.set_num_threads(1)
        init = ToyTransformer.random(np.random.default_rng(cfg.seed), cfg.dim, cfg.vocab, cfg.window,
                                     ["mha"] * cfg.num_layers, cfg.num_heads)
        model, _ = train_toy(init, corpus, ToyTrainConfig(steps=cfg.steps, batch=cfg.batch, lr=cfg.lr,
                                                          seed=cfg.seed), ev)
    quality = evaluate_toy(model, ev)
    if quality["loss"] >= math.log(cfg.vocab) - 0.05:
        raise ValueError("shuffle probe needs a trained model (loss is at the uniform-prediction level)")
    W, N, L = cfg.window, cfg.length, cfg.num_layers
    base_seqs = ev.sequences
    emb = np.stack([s.embeddings for s in base_seqs])
    tgt = np.stack([s.targets for s in base_seqs])
    base_rec = model.forward(emb)
    base_metrics = layer_token_metrics(model, base_rec)
    base_probs = base_rec.probs
    base_nll = _token_nll(base_probs, tgt)

    rows, heat_rows, bin_rows = [], [], []
    zero_check = None
    # sums over (proportion, seed, position) per bin
    m_base = np.zeros((len(METRIC_NAMES), L, NUM_BINS))
    m_delta = np.zeros_like(m_base)
    m_count = np.zeros(NUM_BINS)
    t_delta = np.zeros(NUM_BINS)
    t_count = np.zeros(NUM_BINS)
    conf = {k: [[] for _ in range(NUM_BINS)] for k in ("base", "shuf")}
    for p in cfg.proportions:
        bins = position_bins(p, N)  # per position index
        for s in range(cfg.shuffle_seeds):
            shuffled = [prefix_shuffle(seq, p, seed=[cfg.seed, s, j]) for j, seq in enumerate(base_seqs)]
            rec = model.forward(np.stack([q.embeddings for q in shuffled]))
            met = layer_token_metrics(model, rec)
            nll = _token_nll(rec.probs, tgt)
            if p == 0.0:
                worst = max(float(np.max(np.abs(met[k] - base_metrics[k]))) for k in METRIC_NAMES)
                worst = max(worst, float(np.max(np.abs(nll - base_nll))))
                zero_check = worst if zero_check is None else max(zero_check, worst)
                _require(worst == 0.0, f"p=0 shuffle changed the metrics by {worst!r}")
            valid = tgt != IGNORE
            for b in range(NUM_BINS):
                pos = np.flatnonzero(bins == b)
                if not len(pos):
                    continue
                mpos = pos[pos >= W] - W
                if len(mpos):
                    for j, name in enumerate(METRIC_NAMES):
                        m_base[j, :, b] += base_metrics[name][:, :, mpos].sum(axis=(1, 2))
                        m_delta[j, :, b] += (met[name] - base_metrics[name])[:, :, mpos].sum(axis=(1, 2))
                    m_count[b] += emb.shape[0] * len(mpos)
                sel = valid[:, pos]
                t_delta[b] += (nll[:, pos] - base_nll[:, pos])[sel].sum()
                t_count[b] += sel.sum()
                for key, pr in (("base", base_probs), ("shuf", rec.probs)):
                    conf[key][b].append((pr[:, pos][sel], tgt[:, pos][sel]))

    if not (np.all(m_count > 0) and np.all(t_count > 0)):
        empty = [b for b in range(NUM_BINS) if not (m_count[b] and t_count[b])]
        raise ValueError(f"the proportion grid leaves shuffle-rate bins {empty} without tokens")
    m_base /= m_count
    m_delta /= m_count
    delta_logppl = t_delta / t_count
    for b in range(NUM_BINS):
        pb = np.concatenate([a for a, _ in conf["base"][b]])
        tb = np.concatenate([t for _, t in conf["base"][b]])
        ps = np.concatenate([a for a, _ in conf["shuf"][b]])
        base_rep, shuf_rep = calibration_report(pb, tb), calibration_report(ps, tb)
        bin_rows.append([b, base_rep.log_ppl, delta_logppl[b], base_rep.ece, shuf_rep.ece - base_rep.ece,
                         int(t_count[b])])
        rows.append({"model_id": "toy", "layer": "output", "bin": b, "metric": "log_ppl",
                     "base": base_rep.log_ppl, "delta": float(delta_logppl[b])})
        rows.append({"model_id": "toy", "layer": "output", "bin": b, "metric": "ece",
                     "base": base_rep.ece, "delta": shuf_rep.ece - base_rep.ece})
    for i in range(L):
        for b in range(NUM_BINS):
            for j, name in enumerate(METRIC_NAMES):
                rows.append({"model_id": "toy", "layer": i, "bin": b, "metric": name,
                             "base": float(m_base[j, i, b]), "delta": float(m_delta[j, i, b])})
            heat_rows.append([i, b, m_delta[0, i, b]])

    layer_abs = np.mean(np.abs(m_delta[0]), axis=1)  # per layer, averaged over bins
    per_layer = [_layer_tm(m_delta, i) for i in range(L)]
    k = deep_layer_count(L, cfg.deep_fraction)
    deep = aggregate_deep(per_layer, cfg.deep_fraction)
    shallow = mean_metrics(per_layer[:k])
    deep_abs, shallow_abs = float(np.mean(layer_abs[-k:])), float(np.mean(layer_abs[:k]))

    out = RunResult()
    out.files["shuffle/metrics.csv"] = metrics_csv(rows)
    out.files["shuffle/heatmap.csv"] = csv_text(["layer", "bin", "delta_neg_log_p"], heat_rows)
    out.files["shuffle/bins.csv"] = csv_text(["bin", "log_ppl", "delta_log_ppl", "ece", "delta_ece", "tokens"],
                                             bin_rows)
    out.files["shuffle/model.json"] = json.dumps(model.to_dict(), sort_keys=True) + "\n"
    out.targets = {
        "logppl_monotone": bool(np.all(np.diff(delta_logppl) >= 0)),
        "deep_ge_shallow": deep_abs >= shallow_abs,
        "zero_shuffle_exact": zero_check == 0.0 if zero_check is not None else None,
    }
    out.summary = {
        "experiment": "shuffle", "seed": cfg.seed, "model_accuracy": quality["accuracy"],
        "delta_log_ppl": delta_logppl.tolist(), "layer_abs_delta_neg_log_p": layer_abs.tolist(),
        "deep_abs_delta": deep_abs, "shallow_abs_delta": shallow_abs, "deep_layers": k,
        "deep_delta": deep.as_dict(), "shallow_delta": shallow.as_dict(), "targets": out.targets,
    }
    out.files["shuffle/summary.json"] = json_text(out.summary)
    return out


def _layer_tm(m_delta, i):
    """Bin-averaged deltas of one layer as TokenMetrics."""
    return TokenMetrics(**{name: float(np.mean(m_delta[j, i])) for j, name in enumerate(METRIC_NAMES)})


# ---------------------------------------------------------------------------
# kernel-smoothing limit
# ---------------------------------------------------------------------------


def kernel_test_function(k):
    """Smooth bounded test function of the keys, vectorized over rows."""
    k = np.atleast_2d(k)
    return np.sin(k[:, 0]) + 0.5 * np.cos(k[:, -1])


def run_kernel_limit(cfg):
    if cfg.dim > 3:
        raise ValueError("kernel limit runner supports key dimension <= 3")
    rng = np.random.default_rng(cfg.seed)
    head = AttentionHead(cfg.qk_scale * rng.standard_normal((cfg.dim, cfg.dim)), np.eye(cfg.dim))
    x_q = rng.standard_normal(cfg.dim)
    keys = GaussianKeys(tuple(np.zeros(cfg.dim)), cfg.key_std)
    target = kernel_smoothed_expectation(head, x_q, kernel_test_function, keys, cfg.resolution)
    seeds = [[cfg.seed, 2, s] for s in range(cfg.num_seeds)]
    const = kernel_limit_errors(head, x_q, keys, lambda k: np.ones(len(k)), cfg.sizes[0], seeds[:8],
                                cfg.resolution)
    _require(float(np.max(const)) <= 1e-12, f"constant test function error {float(np.max(const))!r}")
    errs = {n: kernel_limit_errors(head, x_q, keys, kernel_test_function, n, seeds, cfg.resolution, target)
            for n in cfg.sizes}
    rows = [[n, i, e] for n in cfg.sizes for i, e in enumerate(errs[n])]
    mean_err = np.array([np.mean(errs[n]) for n in cfg.sizes])
    slope = loglog_slope(np.array(cfg.sizes, dtype=float), mean_err)
    win = float(np.mean(errs[cfg.sizes[-1]] < errs[cfg.sizes[0]]))
    out = RunResult()
    out.files["kernel/errors.csv"] = csv_text(["n", "seed", "abs_error"], rows)
    out.files["kernel/table.csv"] = csv_text(["n", "mean_abs_error"], list(zip(cfg.sizes, mean_err)))
    out.targets = {"slope_near_half": abs(slope + 0.5) <= 0.15, "largest_beats_smallest": win >= 0.9}
    out.summary = {"experiment": "kernel", "seed": cfg.seed, "target": target, "slope": slope,
                   "mean_abs_error": dict(zip(map(str, cfg.sizes), mean_err.tolist())),
                   "fraction_largest_beats_smallest": win, "targets": out.targets}
    out.files["kernel/summary.json"] = json_text(out.summary)
    return out


RUNNERS = {
    "toy2d": run_toy2d,
    "vmf": run_vmf_flow,
    "coupling": run_coupling_contrast,
    "shuffle": run_shuffle_probe,
    "kernel": run_kernel_limit,
}
