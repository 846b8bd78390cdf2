"""Last-token representations over a parallel corpus and per-site alignment fits."""

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DegenerateData, ParseError, SiteMismatch
from .model import SiteId, SiteKind, all_sites, make_site
from .textio import LineReader, atomic_write_text, fmt_float, format_matrix, read_matrix, read_text

ALIGN_MAGIC = "incline-align v1"
REPS_MAGIC = "incline-reps v1"


def thread_count(default=1):
    """Worker count from ``INCLINE_THREADS`` (absent or invalid -> ``default``)."""
    raw = os.environ.get("INCLINE_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


def site_key(site):
    return f"{site.kind.value} {site.layer}"


def parse_site(kind, layer):
    try:
        return make_site(kind, int(layer))
    except ValueError as exc:
        raise ValueError(f"bad site {kind} {layer}: {exc}") from None


@dataclass
class RepTable:
    """Per-site N x d matrices; row i belongs to sentence i."""

    sites: dict
    n_layers: int

    @property
    def n(self):
        return next(iter(self.sites.values())).shape[0] if self.sites else 0

    def head(self, n):
        return RepTable({s: M[:n] for s, M in self.sites.items()}, self.n_layers)


def extract_reps(model, sentences, sites=None):
    """Stack the pre-intervention last-token trace of every sentence at ``sites``."""
    sites = list(all_sites(model.config.n_layers) if sites is None else sites)
    d = model.config.d_model
    n = len(sentences)
    out = {s: np.empty((n, d)) for s in sites}
    for i, tokens in enumerate(sentences):
        _, trace = model.forward(tokens)
        for s in sites:
            out[s][i] = trace.sites[s]
    return RepTable(out, model.config.n_layers)


@dataclass
class AlignmentSet:
    matrices: dict
    src: str = "B"
    tgt: str = "A"
    n_pairs: int = 0
    n_layers: int = 0
    model_digest: str = "-"
    ridges: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    fit_seconds: float = 0.0

    @property
    def sites(self):
        return list(self.matrices)


def _check_pair(rep_src, rep_tgt):
    if set(rep_src.sites) != set(rep_tgt.sites):
        missing = sorted(map(str, set(rep_src.sites) ^ set(rep_tgt.sites)))
        raise SiteMismatch(f"site sets differ: {', '.join(missing)}")
    if rep_src.n != rep_tgt.n:
        raise SiteMismatch(f"row counts differ: {rep_src.n} vs {rep_tgt.n}")


def fit_alignment(
    rep_src, rep_tgt, ridge=0.0, src="B", tgt="A", model_digest="-", threads=None, ridge_rel=0.0
):
    """One least-squares map per site, sending source rows onto target rows.

    ``ridge_rel`` is a per-site penalty relative to ``trace(S^T S) / d``
    (see :func:`incline.linalg.fit_linear_map`); the absolute ridge that was
    actually used is stored per site.
    """
    _check_pair(rep_src, rep_tgt)
    sites = list(rep_src.sites)
    if rep_src.n < 1:
        raise DegenerateData("no pairs to fit")

    def fit_one(site):
        S, T = rep_src.sites[site], rep_tgt.sites[site]
        W, used = linalg.fit_linear_map(S, T, ridge, full_output=True, ridge_rel=ridge_rel)
        return site, W, used, linalg.residual(W, S, T)

    t0 = time.perf_counter()
    workers = threads or thread_count()
    if workers > 1 and len(sites) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fit_one, sites))
    else:
        results = [fit_one(s) for s in sites]
    elapsed = time.perf_counter() - t0
    return AlignmentSet(
        matrices={s: W for s, W, _, _ in results},
        src=src,
        tgt=tgt,
        n_pairs=rep_src.n,
        n_layers=rep_src.n_layers,
        model_digest=model_digest,
        ridges={s: r for s, _, r, _ in results},
        residuals={s: res for s, _, _, res in results},
        fit_seconds=elapsed,
    )


def align_corpus(model, corpus, sites=None, ridge=0.0, ridge_rel=0.0):
    """Extract both sides of ``corpus`` and fit; convenience for pipelines."""
    rep_src = extract_reps(model, corpus.sources(), sites)
    rep_tgt = extract_reps(model, corpus.targets(), sites)
    return fit_alignment(
        rep_src, rep_tgt, ridge, corpus.src, corpus.tgt, model.digest(), ridge_rel=ridge_rel
    )


# --- files -------------------------------------------------------------------


def alignment_text(aset):
    lines = [
        ALIGN_MAGIC,
        f"src {aset.src}",
        f"tgt {aset.tgt}",
        f"n_pairs {aset.n_pairs}",
        f"n_layers {aset.n_layers}",
        f"model_digest {aset.model_digest}",
        "sites " + " ".join(str(s) for s in aset.matrices),
    ]
    parts = ["\n".join(lines) + "\n"]
    for site, W in aset.matrices.items():
        head = f"site {site_key(site)} ridge {fmt_float(aset.ridges.get(site, 0.0))}"
        if site in aset.residuals:
            head += f" residual {fmt_float(aset.residuals[site])}"
        parts.append(head + "\n")
        parts.append(format_matrix(W))
    return "".join(parts)


def save_alignment(path, aset):
    atomic_write_text(path, alignment_text(aset))


def _read_meta(reader, keys):
    meta = {}
    for key in keys:
        parts = reader.next(key).split(None, 1)
        if not parts or parts[0] != key:
            raise reader.error(f"expected '{key} <value>'")
        meta[key] = parts[1].strip() if len(parts) > 1 else ""
    return meta


def _site_from_label(label, reader):
    for kind in SiteKind:
        if label.startswith(kind.value) and label[len(kind.value) :].isdigit():
            return SiteId(kind, int(label[len(kind.value) :]))
    raise reader.error(f"bad site label {label!r}")


def parse_alignment(text, path=None, model=None):
    reader = LineReader(text, path)
    if reader.next("header").strip() != ALIGN_MAGIC:
        raise reader.error(f"expected header {ALIGN_MAGIC!r}")
    meta = _read_meta(reader, ("src", "tgt", "n_pairs", "n_layers", "model_digest", "sites"))
    expected = [_site_from_label(lbl, reader) for lbl in meta["sites"].split()]
    matrices, ridges, residuals = {}, {}, {}
    while not reader.at_end():
        parts = reader.next().split()
        if len(parts) not in (5, 7) or parts[0] != "site" or parts[3] != "ridge":
            raise reader.error("expected 'site <kind> <layer> ridge <r>'")
        try:
            site = parse_site(parts[1], parts[2])
            ridges[site] = float(parts[4])
            if len(parts) == 7:
                residuals[site] = float(parts[6])
        except ValueError as exc:
            raise reader.error(str(exc)) from None
        W = read_matrix(reader)
        if W.shape[0] != W.shape[1]:
            raise reader.error(f"alignment matrix for {site} is not square")
        matrices[site] = W
    for site in expected:
        if site not in matrices:
            raise ParseError(f"missing matrix for site {site_key(site)}", path)
    for site in matrices:
        if site not in expected:
            raise ParseError(f"unexpected site {site_key(site)}", path)
    try:
        n_pairs, n_layers = int(meta["n_pairs"]), int(meta["n_layers"])
    except ValueError:
        raise ParseError("n_pairs and n_layers must be integers", path) from None
    aset = AlignmentSet(
        matrices={s: matrices[s] for s in expected},
        src=meta["src"],
        tgt=meta["tgt"],
        n_pairs=n_pairs,
        n_layers=n_layers,
        model_digest=meta["model_digest"],
        ridges=ridges,
        residuals=residuals,
    )
    if model is not None and model.digest() != aset.model_digest:
        warnings.warn(
            f"alignment {path or ''} was fitted on model {aset.model_digest[:12]}, "
            f"not {model.digest()[:12]}",
            stacklevel=2,
        )
    return aset


def load_alignment(path, model=None):
    return parse_alignment(read_text(path), path=path, model=model)


def reps_text(table):
    parts = [f"{REPS_MAGIC}\nn_layers {table.n_layers}\n"]
    for site, M in table.sites.items():
        parts.append(f"site {site_key(site)}\n")
        parts.append(format_matrix(M))
    return "".join(parts)


def save_reps(path, table):
    atomic_write_text(path, reps_text(table))


def load_reps(path):
    reader = LineReader(read_text(path), path)
    if reader.next("header").strip() != REPS_MAGIC:
        raise reader.error(f"expected header {REPS_MAGIC!r}")
    n_layers = int(_read_meta(reader, ("n_layers",))["n_layers"])
    sites = {}
    while not reader.at_end():
        parts = reader.next().split()
        if len(parts) != 3 or parts[0] != "site":
            raise reader.error("expected 'site <kind> <layer>'")
        try:
            site = parse_site(parts[1], parts[2])
        except ValueError as exc:
            raise reader.error(str(exc)) from None
        sites[site] = read_matrix(reader)
    return RepTable(sites, n_layers)
