"""Last-token interventions: the learned linear blend and the static-offset baseline.

For an active site with alignment matrix ``W`` the last-position vector
``h`` becomes ``h + alpha * (W @ h)``; the steering baseline adds the fixed
vector ``alpha * v`` instead.  ``alpha == 0`` returns ``h`` itself.
"""

import enum
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, MissingSiteMatrix, MissingSiteVector, SiteMismatch
from .model import SiteKind
from .textio import LineReader, atomic_write_text, format_matrix, read_matrix, read_text

CAA_MAGIC = "incline-caa v1"


class Mode(str, enum.Enum):
    INCLINE = "incline"
    CAA = "caa"
    NONE = "none"


@dataclass(frozen=True)
class InterventionConfig:
    alpha: float = 0.0
    sites: frozenset = frozenset({SiteKind.HIDDEN})
    layers: frozenset = None  # None means every layer
    mode: Mode = Mode.INCLINE

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "sites", frozenset(SiteKind(s) for s in self.sites))
        if self.layers is not None:
            object.__setattr__(self, "layers", frozenset(int(l) for l in self.layers))
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.mode is not Mode.NONE and not self.sites:
            raise ValueError("an active intervention needs at least one site")

    def covers(self, site):
        if self.mode is Mode.NONE or site.kind not in self.sites:
            return False
        return self.layers is None or site.layer in self.layers

    def active_sites(self, n_layers):
        from .model import all_sites

        return [s for s in all_sites(n_layers) if self.covers(s)]


@dataclass
class SteeringSet:
    vectors: dict
    src: str = "B"
    tgt: str = "A"
    n_pairs: int = 0
    n_layers: int = 0


def fit_caa(rep_src, rep_tgt, src="B", tgt="A"):
    """Per-site steering vector ``mean(target rows) - mean(source rows)``."""
    if set(rep_src.sites) != set(rep_tgt.sites):
        raise SiteMismatch("source and target representation tables cover different sites")
    if rep_src.n != rep_tgt.n:
        raise SiteMismatch(f"row counts differ: {rep_src.n} vs {rep_tgt.n}")
    vectors = {s: rep_tgt.sites[s].mean(axis=0) - rep_src.sites[s].mean(axis=0) for s in rep_src.sites}
    return SteeringSet(vectors, src, tgt, rep_src.n, rep_src.n_layers)


class Interventor:
    """Validated, immutable intervention with a thread-safe invocation counter."""

    def __init__(self, config, payload=None, n_layers=None):
        self.config = config
        self.payload = payload
        self.n_layers = n_layers if n_layers is not None else getattr(payload, "n_layers", 0)
        self._count = 0
        self._lock = threading.Lock()
        self._table = {}
        if config.mode is Mode.NONE:
            return
        if config.mode is Mode.INCLINE:
            store = getattr(payload, "matrices", None)
            missing_exc = MissingSiteMatrix
        else:
            store = getattr(payload, "vectors", None)
            missing_exc = MissingSiteVector
        if store is None:
            raise TypeError(f"{config.mode.value} needs a matching payload")
        d = None
        for site in config.active_sites(self.n_layers):
            if site not in store:
                raise missing_exc(f"payload has no entry for site {site}")
            value = np.ascontiguousarray(store[site], dtype=np.float64)
            dim = value.shape[0]
            if config.mode is Mode.INCLINE and value.shape != (dim, dim):
                raise DimMismatch(f"matrix for {site} is not square: {value.shape}")
            if d is None:
                d = dim
            elif dim != d:
                raise DimMismatch(f"site {site} has dimension {dim}, expected {d}")
            self._table[site] = value
        self.dim = d

    @property
    def invocations(self):
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0

    def is_active(self, site):
        return site in self._table

    def apply(self, site, h):
        with self._lock:
            self._count += 1
        if self.config.mode is Mode.INCLINE:
            return apply_incline(self, site, h)
        return apply_caa(self, site, h)

    def delta(self, site, h):
        """What ``apply`` would add to ``h`` (zero for alpha == 0)."""
        return self.apply(site, h) - h


def _lookup(iv, site, h, missing_exc):
    if iv.config.mode is Mode.NONE or not iv.config.covers(site):
        return None
    try:
        value = iv._table[site]
    except KeyError:
        raise missing_exc(f"no payload for site {site}") from None
    if h.shape[-1] != value.shape[0]:
        raise DimMismatch(f"vector has dimension {h.shape[-1]}, payload expects {value.shape[0]}")
    return value


def apply_incline(iv, site, h):
    """``h + alpha * (W_site @ h)``; inactive sites and ``alpha == 0`` return ``h`` itself."""
    W = _lookup(iv, site, h, MissingSiteMatrix)
    if W is None or iv.config.alpha == 0:
        return h
    return h + iv.config.alpha * (W @ h)


def apply_caa(iv, site, h):
    """``h + alpha * v_site``; inactive sites and ``alpha == 0`` return ``h`` itself."""
    v = _lookup(iv, site, h, MissingSiteVector)
    if v is None or iv.config.alpha == 0:
        return h
    return h + iv.config.alpha * v


def make_interventor(payload, config, n_layers=None):
    return Interventor(config, payload, n_layers)


def none_interventor():
    return Interventor(InterventionConfig(mode=Mode.NONE))


# --- steering file ------------------------------------------------------------


def steering_text(steer):
    parts = [
        f"{CAA_MAGIC}\nsrc {steer.src}\ntgt {steer.tgt}\nn_pairs {steer.n_pairs}\nn_layers {steer.n_layers}\n"
    ]
    for site, v in steer.vectors.items():
        parts.append(f"site {site.kind.value} {site.layer}\n")
        parts.append(format_matrix(np.asarray(v)[None, :]))
    return "".join(parts)


def save_steering(path, steer):
    atomic_write_text(path, steering_text(steer))


def load_steering(path):
    from .align import _read_meta, parse_site

    reader = LineReader(read_text(path), path)
    if reader.next("header").strip() != CAA_MAGIC:
        raise reader.error(f"expected header {CAA_MAGIC!r}")
    meta = _read_meta(reader, ("src", "tgt", "n_pairs", "n_layers"))
    vectors = {}
    while not reader.at_end():
        parts = reader.next().split()
        if len(parts) != 3 or parts[0] != "site":
            raise reader.error("expected 'site <kind> <layer>'")
        try:
            site = parse_site(parts[1], parts[2])
        except ValueError as exc:
            raise reader.error(str(exc)) from None
        M = read_matrix(reader)
        if M.shape[0] != 1:
            raise reader.error("steering vectors are stored as 1 x d blocks")
        vectors[site] = M[0]
    return SteeringSet(vectors, meta["src"], meta["tgt"], int(meta["n_pairs"]), int(meta["n_layers"]))
