"""Metrics and experiment procedures.

Accuracy is read from the answer position: the prediction is the answer
label with the largest logit (ties go to the lowest token id).  Generation
is scored by exact match after truncating at ``STOP``.  Everything else
here (CPC, the alpha grid, ablations, the orthogonal probe pair) is built
on top of :func:`eval_task`.
"""

import csv
import io
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import align
from .corpus import ANSWER_TOKENS, STOP
from .errors import DegenerateLabels, DimMismatch, ItemMismatch
from .intervene import InterventionConfig, Mode, apply_incline, make_interventor
from .model import SiteKind
from .textio import atomic_write_text, fmt_float

DEFAULT_GRID = tuple(round(-1.0 + 0.1 * i, 10) + 0.0 for i in range(21))
DATA_SIZES = (50, 100, 200, 500, 1000, 2000)


@dataclass
class ItemRecord:
    item_id: int
    gold: object
    predicted: object
    correct: bool
    latency: float


@dataclass
class EvalResult:
    records: list
    lang: str = "?"
    metric: str = "accuracy"
    config: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.records)

    @property
    def score(self):
        if not self.records:
            return float("nan")
        return sum(r.correct for r in self.records) / len(self.records)

    accuracy = score

    @property
    def correct(self):
        return np.array([r.correct for r in self.records], dtype=bool)

    @property
    def item_ids(self):
        return [r.item_id for r in self.records]

    def median_latency(self):
        return statistics.median(r.latency for r in self.records)


def _timed(fn, *args):
    t0 = time.perf_counter_ns()
    out = fn(*args)
    # perf_counter_ns has ~ns resolution; clamp so a latency is never 0
    return out, max(time.perf_counter_ns() - t0, 1) * 1e-9


def predict_answer(logits, answer_tokens=ANSWER_TOKENS):
    """Label with the largest logit; ``np.argmax`` keeps the first (lowest id) tie."""
    toks = sorted(answer_tokens)
    return toks[int(np.argmax([logits[t] for t in toks]))]


def eval_task(model, dataset, interventor=None, config=None):
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    records = []
    for i, item in enumerate(dataset):
        (logits, _), dt = _timed(model.forward, item.tokens, interventor)
        pred = predict_answer(logits[item.answer_position])
        records.append(ItemRecord(i, item.gold, pred, pred == item.gold, dt))
    return EvalResult(records, dataset.lang, "accuracy", dict(config or {}))


def truncate_at_stop(seq, stop=STOP):
    seq = [int(t) for t in seq]
    return seq[: seq.index(stop)] if stop in seq else seq


def eval_generation(model, prompts, golds, interventor=None, max_new=None, lang="?", stop=STOP):
    """Exact match of greedy continuations against ``golds`` (both cut at ``stop``).

    ``max_new`` defaults per item to ``len(gold) + 1`` (room for the stop
    token), capped by the model's context.
    """
    if len(prompts) != len(golds):
        raise ItemMismatch(f"{len(prompts)} prompts but {len(golds)} golds")
    records = []
    limit = model.config.max_seq_len
    for i, (prompt, gold) in enumerate(zip(prompts, golds)):
        gold = truncate_at_stop(gold, stop)
        n = len(gold) + 1 if max_new is None else max_new
        n = min(n, limit - len(prompt))
        out, dt = _timed(model.greedy_decode, prompt, n, interventor)
        pred = truncate_at_stop(out[len(prompt) :], stop)
        records.append(ItemRecord(i, tuple(gold), tuple(pred), pred == gold, dt))
    return EvalResult(records, lang, "em")


def cpc(result_src, result_tgt):
    """Fraction of items answered correctly in both languages."""
    if result_src.item_ids != result_tgt.item_ids:
        raise ItemMismatch("results cover different items")
    if result_src.n == 0:
        raise ItemMismatch("no items")
    both = result_src.correct & result_tgt.correct
    return int(both.sum()) / result_src.n


# --- alpha grid ---------------------------------------------------------------


def make_grid(lo, hi, step):
    """Inclusive grid ``lo, lo+step, ..., hi`` (endpoint tolerance 1e-9)."""
    if not step > 0:
        raise ValueError("step must be positive")
    if hi < lo - 1e-9:
        raise ValueError("hi must be >= lo")
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    # rounding keeps 0.1-steps free of representation noise; + 0.0 turns -0.0 into 0.0
    return [round(lo + i * step, 10) + 0.0 for i in range(n)]


def parse_grid(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must look like lo:hi:step, got {text!r}")
    lo, hi, step = (float(p) for p in parts)
    return make_grid(lo, hi, step)


def best_alpha(grid, scores):
    """Index of the best score; ties go to smallest ``|alpha|``, then negative."""
    top = max(scores)
    tied = [i for i, s in enumerate(scores) if s == top]
    return min(tied, key=lambda i: (abs(grid[i]), grid[i] > 0))


@dataclass
class GridSearchReport:
    grid: list
    accuracies: list
    best_index: int
    baseline: float
    config: dict = field(default_factory=dict)

    @property
    def best_alpha(self):
        return self.grid[self.best_index]

    @property
    def best_accuracy(self):
        return self.accuracies[self.best_index]

    def csv_text(self):
        return csv_text(["alpha", "accuracy"], zip(self.grid, self.accuracies))


def _config(alpha, sites, layers, mode):
    return InterventionConfig(alpha=alpha, sites=frozenset(sites), layers=layers, mode=mode)


def _map(fn, xs, workers):
    if workers and workers > 1 and len(xs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, xs))
    return [fn(x) for x in xs]


def grid_search_alpha(
    model,
    payload,
    val,
    grid=DEFAULT_GRID,
    sites=(SiteKind.HIDDEN,),
    layers=None,
    mode=Mode.INCLINE,
    baseline=None,
    workers=None,
):
    """Validation accuracy for each alpha in ``grid`` with one fixed site/layer config."""
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("grid is empty")
    n_layers = model.config.n_layers
    workers = align.thread_count() if workers is None else workers

    def run(alpha):
        iv = make_interventor(payload, _config(alpha, sites, layers, mode), n_layers)
        return eval_task(model, val, iv).accuracy

    accs = _map(run, grid, workers)
    if baseline is None:
        baseline = eval_task(model, val).accuracy
    cfg = {
        "mode": Mode(mode).value,
        "sites": ",".join(sorted(SiteKind(s).value for s in sites)),
        "layers": "all" if layers is None else ",".join(str(l) for l in sorted(layers)),
    }
    return GridSearchReport(grid, accs, best_alpha(grid, accs), baseline, cfg)


# --- ablations -----------------------------------------------------------------


class Axis:
    SITE = "site"
    LAYER = "layer"
    DATA_SIZE = "data_size"
    DOMAIN = "domain"
    ALL = (SITE, LAYER, DATA_SIZE, DOMAIN)


SITE_ORDER = (SiteKind.HIDDEN, SiteKind.ATTN, SiteKind.FFN, SiteKind.EMBEDDING)


@dataclass
class AblationRow:
    setting: str
    alpha: float
    accuracy: float
    extra: dict = field(default_factory=dict)


@dataclass
class AblationTable:
    axis: str
    baseline: float
    rows: list

    @property
    def settings(self):
        return [r.setting for r in self.rows]

    def argmax(self):
        return max(self.rows, key=lambda r: r.accuracy).setting

    def csv_text(self, timings=True):
        extra = []
        for r in self.rows:
            for k in r.extra:
                if k not in extra:
                    extra.append(k)
        def cell(r, k):
            if not timings and k.endswith("seconds"):
                return "-"
            return r.extra.get(k, "")

        rows = [("baseline", 0.0, self.baseline) + tuple("" for _ in extra)]
        for r in self.rows:
            rows.append((r.setting, r.alpha, r.accuracy) + tuple(cell(r, k) for k in extra))
        key = "n_pairs" if self.axis == Axis.DATA_SIZE else self.axis
        return csv_text([key, "alpha", "accuracy"] + extra, rows)


def _evaluate_setting(model, payload, test, val, alpha, grid, sites, layers, mode):
    if val is not None:
        rep = grid_search_alpha(model, payload, val, grid, sites, layers, mode)
        alpha = rep.best_alpha
    iv = make_interventor(payload, _config(alpha, sites, layers, mode), model.config.n_layers)
    return alpha, eval_task(model, test, iv).accuracy


def ablate(
    model,
    alignment,
    test,
    axis,
    *,
    alpha=1.0,
    val=None,
    grid=DEFAULT_GRID,
    mode=Mode.INCLINE,
    parallel=None,
    domains=None,
    sizes=DATA_SIZES,
    ridge=0.0,
    ridge_rel=0.0,
    repeats=3,
):
    """One row per setting of ``axis``, all against the same alpha=0 baseline.

    With ``val`` every row picks its own alpha on ``val`` (test is never used
    for selection); otherwise ``alpha`` is used throughout.  ``DATA_SIZE``
    refits Hidden maps on nested prefixes of ``parallel`` and times
    extraction plus solve (minimum over ``repeats``); ``DOMAIN`` refits on
    each corpus in ``domains`` (name -> ParallelCorpus).
    """
    baseline = eval_task(model, test).accuracy
    n_layers = model.config.n_layers
    hidden = (SiteKind.HIDDEN,)
    rows = []

    def setting(payload, sites, layers):
        return _evaluate_setting(model, payload, test, val, alpha, grid, sites, layers, mode)

    if axis == Axis.SITE:
        for kind in SITE_ORDER:
            a, acc = setting(alignment, (kind,), None)
            rows.append(AblationRow(kind.value, a, acc))
    elif axis == Axis.LAYER:
        for layer in range(n_layers):
            a, acc = setting(alignment, hidden, {layer})
            rows.append(AblationRow(f"L{layer}", a, acc))
        a, acc = setting(alignment, hidden, None)
        rows.append(AblationRow("ALL", a, acc))
    elif axis == Axis.DATA_SIZE:
        if parallel is None:
            raise ValueError("the data-size ablation needs a parallel corpus")
        sites = [s for s in _hidden_sites(n_layers)]
        for n in sizes:
            if n > len(parallel):
                raise ValueError(f"parallel corpus has {len(parallel)} pairs, need {n}")
            sub = parallel.head(n)
            best = None
            for _ in range(max(1, repeats)):
                t0 = time.perf_counter()
                rs = align.extract_reps(model, sub.sources(), sites)
                rt = align.extract_reps(model, sub.targets(), sites)
                aset = align.fit_alignment(rs, rt, ridge, sub.src, sub.tgt, ridge_rel=ridge_rel, threads=1)
                total = time.perf_counter() - t0
                if best is None or total < best[0]:
                    best = (total, aset.fit_seconds)
            payload = _payload_for(mode, aset, rs, rt)
            a, acc = setting(payload, hidden, None)
            rows.append(AblationRow(str(n), a, acc, {"fit_seconds": best[0], "solve_seconds": best[1]}))
    elif axis == Axis.DOMAIN:
        if not domains:
            raise ValueError("the domain ablation needs named parallel corpora")
        sites = _hidden_sites(n_layers)
        for name, corpus in domains.items():
            rs = align.extract_reps(model, corpus.sources(), sites)
            rt = align.extract_reps(model, corpus.targets(), sites)
            aset = align.fit_alignment(rs, rt, ridge, corpus.src, corpus.tgt, ridge_rel=ridge_rel)
            a, acc = setting(_payload_for(mode, aset, rs, rt), hidden, None)
            rows.append(AblationRow(name, a, acc))
    else:
        raise ValueError(f"unknown ablation axis {axis!r}")
    return AblationTable(axis, baseline, rows)


def _hidden_sites(n_layers):
    from .model import SiteId

    return [SiteId(SiteKind.HIDDEN, l) for l in range(n_layers)]


def _payload_for(mode, aset, rs, rt):
    if Mode(mode) is Mode.CAA:
        from .intervene import fit_caa

        return fit_caa(rs, rt)
    return aset


# --- probes --------------------------------------------------------------------


@dataclass
class ProbePair:
    w1: np.ndarray
    w2: np.ndarray
    b1: float
    b2: float
    acc1: float
    acc2: float
    train_acc1: float = float("nan")
    train_acc2: float = float("nan")


def split_4_1(n):
    """Deterministic 4:1 split: every fifth index is held out."""
    idx = np.arange(n)
    held = idx % 5 == 4
    return idx[~held], idx[held]


def _logistic_gd(X, y, steps, lr, basis=None):
    """Full-batch logistic regression from zero; gradients projected off ``basis``."""
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(steps):
        z = X @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))  # stable sigmoid
        g = p - y
        gw = X.T @ g / n
        if basis is not None:
            gw = gw - basis * (basis @ gw)
        w -= lr * gw
        b -= lr * float(g.mean())
    return w, b


def _accuracy(X, y, w, b):
    return float(np.mean(((X @ w + b) > 0) == (y > 0.5))) if len(y) else float("nan")


def fit_probe_pair(reps, labels, steps=2000, lr=0.1):
    """Two orthogonal unit-norm logistic probes for a binary labelling of ``reps``."""
    X = np.asarray(reps, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimMismatch(f"reps {X.shape} and labels {y.shape} do not line up")
    if X.shape[0] < 10:
        raise DegenerateLabels(f"need at least 10 rows, got {X.shape[0]}")
    if not np.all((y == 0) | (y == 1)):
        raise DegenerateLabels("labels must be 0/1")
    tr, ho = split_4_1(X.shape[0])
    if len(set(y[tr])) < 2:
        raise DegenerateLabels("training split contains a single class")

    # GD runs on whitened features (training-split mean and covariance).  The
    # classes often differ along directions whose variance is 1e-7 of the
    # largest, which 2000 plain steps on raw vectors cannot reach; weights
    # are mapped back so the probes act on raw vectors.
    mu = X[tr].mean(axis=0)
    lam, V = np.linalg.eigh(np.cov((X[tr] - mu).T, bias=True).reshape(X.shape[1], X.shape[1]))
    scale = np.sqrt(np.maximum(lam, 1e-12 * lam.max()))
    scale[scale == 0] = 1.0
    P = V / scale
    Z = (X[tr] - mu) @ P

    def to_raw(v, c):
        w = P @ v
        return w, c - float(w @ mu)

    v1, c1 = _logistic_gd(Z, y[tr], steps, lr)
    w1, b1 = to_raw(v1, c1)
    n1 = np.linalg.norm(w1)
    if n1 == 0:
        raise DegenerateLabels("first probe did not move; classes are indistinguishable")
    w1, b1 = w1 / n1, b1 / n1
    # raw-space orthogonality (P v2) . w1 = 0 is v2 . (P^T w1) = 0 in whitened space
    u = P.T @ w1
    v2, c2 = _logistic_gd(Z, y[tr], steps, lr, basis=u / np.linalg.norm(u))
    w2, b2 = to_raw(v2, c2)
    w2 = w2 - w1 * (w1 @ w2)
    n2 = np.linalg.norm(w2)
    if n2 < 1e-12:
        # nothing to learn off w1: fall back to the coordinate axis least aligned with it
        e = np.zeros_like(w1)
        e[int(np.argmin(np.abs(w1)))] = 1.0
        w2, b2 = e - w1 * (w1 @ e), 0.0
        n2 = np.linalg.norm(w2)
    w2, b2 = w2 / n2, b2 / n2
    w2 = w2 - w1 * (w1 @ w2)
    w2 /= np.linalg.norm(w2)
    return ProbePair(
        w1,
        w2,
        float(b1),
        float(b2),
        _accuracy(X[ho], y[ho], w1, b1),
        _accuracy(X[ho], y[ho], w2, b2),
        _accuracy(X[tr], y[tr], w1, b1),
        _accuracy(X[tr], y[tr], w2, b2),
    )


def project2d(reps, probes, labels=None):
    X = np.asarray(reps, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != probes.w1.shape[0]:
        raise DimMismatch(f"reps have dimension {X.shape[1]}, probes {probes.w1.shape[0]}")
    xs, ys = X @ probes.w1, X @ probes.w2
    labels = [""] * len(xs) if labels is None else list(labels)
    return [(float(x), float(y), lab) for x, y, lab in zip(xs, ys, labels)]


def centroid(points):
    arr = np.array([(p[0], p[1]) for p in points])
    return arr.mean(axis=0)


def intervened_reps(model, sentences, payload, config, site):
    """Post-intervention vectors at ``site`` (the value that flows downstream)."""
    iv = make_interventor(payload, config, model.config.n_layers)
    out = np.empty((len(sentences), model.config.d_model))
    for i, tokens in enumerate(sentences):
        _, trace = model.forward(tokens, iv)
        out[i] = apply_incline(iv, site, trace.sites[site]) if iv.is_active(site) else trace.sites[site]
    return out


# --- report writers ------------------------------------------------------------


def _cell(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return fmt_float(float(v))
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def report_text(values, tables=None):
    """``key value`` lines, then each table as ``table <name>`` + CSV + ``end``."""
    lines = [f"{k} {_cell(v)}" for k, v in values.items()]
    out = "\n".join(lines) + "\n"
    for name, text in (tables or {}).items():
        out += f"table {name}\n{text}end\n"
    return out


def items_csv(result):
    return csv_text(
        ["item", "gold", "predicted", "correct"],
        ((r.item_id, _seq(r.gold), _seq(r.predicted), r.correct) for r in result.records),
    )


def _seq(v):
    return " ".join(str(t) for t in v) if isinstance(v, (tuple, list)) else v
