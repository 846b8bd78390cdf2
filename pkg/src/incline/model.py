"""A tiny decoder-only transformer in numpy with hand-written backprop.

Architecture: learned token + absolute position embeddings, pre-norm blocks
(causal multi-head attention, GELU feed-forward), a final LayerNorm and an
untied (optionally tied) output projection.

Four kinds of hook sites exist at the last position of the input:

* ``emb``    - sum of token and position embeddings (layer 0 only)
* ``attn``   - attention sub-block output, before the residual add
* ``ffn``    - feed-forward sub-block output, before the residual add
* ``hidden`` - residual stream after the block

An *interventor* (see :mod:`incline.intervene`) may replace the vector at
any of these sites; the replacement flows downstream.  Traces always record
the value seen before replacement.
"""

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import (
    FormatVersionMismatch,
    InvalidConfig,
    InvalidDataset,
    ParseError,
    SequenceTooLong,
    TokenOutOfRange,
)
from .textio import LineReader, atomic_write_text, format_matrix, read_matrix, read_text, sha256_text

LN_EPS = 1e-5
INIT_STD = 0.02
CHECKPOINT_MAGIC = "toytx v1"


class SiteKind(str, enum.Enum):
    EMBEDDING = "emb"
    ATTN = "attn"
    FFN = "ffn"
    HIDDEN = "hidden"

    def __str__(self):
        return self.value


class SiteId(NamedTuple):
    kind: SiteKind
    layer: int = 0

    def __str__(self):
        return f"{self.kind.value}{self.layer}"


def make_site(kind, layer=0):
    kind = SiteKind(kind)
    if kind is SiteKind.EMBEDDING and layer != 0:
        raise ValueError("the embedding site only exists at layer 0")
    if layer < 0:
        raise ValueError("layer must be >= 0")
    return SiteId(kind, int(layer))


def all_sites(n_layers):
    """Every hook site of an ``n_layers`` model, in forward order."""
    sites = [SiteId(SiteKind.EMBEDDING, 0)]
    for layer in range(n_layers):
        sites += [SiteId(SiteKind.ATTN, layer), SiteId(SiteKind.FFN, layer), SiteId(SiteKind.HIDDEN, layer)]
    return sites


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    max_seq_len: int = 32
    seed: int = 0
    tied: bool = False

    def validate(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.max_seq_len < 2:
            raise InvalidConfig("max_seq_len must be >= 2")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must fit in uint64")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads


@dataclass
class TrainConfig:
    steps: int = 1500
    lr: float = 3e-3
    batch_size: int = 64
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class TraceRecord:
    """Pre-intervention vectors at the last input position, plus its logits."""

    sites: dict = field(default_factory=dict)
    logits: np.ndarray = None


def param_shapes(cfg):
    """Ordered ``name -> shape`` map; this order is the checkpoint order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_seq_len, d)}
    for l in range(cfg.n_layers):
        p = f"l{l}."
        shapes.update(
            {
                p + "ln1_g": (d,), p + "ln1_b": (d,),
                p + "w_q": (d, d), p + "b_q": (d,),
                p + "w_k": (d, d), p + "b_k": (d,),
                p + "w_v": (d, d), p + "b_v": (d,),
                p + "w_o": (d, d), p + "b_o": (d,),
                p + "ln2_g": (d,), p + "ln2_b": (d,),
                p + "w_in": (d, f), p + "b_in": (f,),
                p + "w_out": (f, d), p + "b_out": (d,),
            }
        )
    shapes["lnf_g"] = (d,)
    shapes["lnf_b"] = (d,)
    if not cfg.tied:
        shapes["unembed"] = (d, cfg.vocab_size)
    shapes["head_b"] = (cfg.vocab_size,)
    return shapes


def _init_param(name, shape, seed, index):
    tail = name.rsplit(".", 1)[-1]
    if tail.endswith("_g"):
        return np.ones(shape)
    if tail.startswith("b_") or tail.endswith("_b"):
        return np.zeros(shape)
    # Philox is counter-based: tensor ``index`` gets its own counter block.
    bitgen = np.random.Philox(key=int(seed), counter=[0, 0, 0, index])
    return np.random.Generator(bitgen).normal(0.0, INIT_STD, size=shape)


def new_transformer(config):
    config.validate()
    params = {
        name: _init_param(name, shape, config.seed, i)
        for i, (name, shape) in enumerate(param_shapes(config).items())
    }
    return ToyTransformer(config, params)


# --- numerics ---------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u**3)))


def _gelu_grad(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class _Hook:
    """Applies an interventor at the last position and records traces."""

    __slots__ = ("iv", "trace", "row")

    def __init__(self, iv, trace, row):
        self.iv = iv
        self.trace = trace
        self.row = row  # index of the intervened position inside the chunk, or None

    def __call__(self, site, x):
        row = self.row
        if row is None:
            return x
        vec = x[0, row]
        if self.trace is not None:
            self.trace.sites[site] = vec.copy()
        iv = self.iv
        if iv is not None and iv.is_active(site):
            new = iv.apply(site, vec)
            if new is not vec:
                x[0, row] = new
        return x


class ToyTransformer:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    # -- bookkeeping ---------------------------------------------------------

    def copy(self):
        return ToyTransformer(self.config, {k: v.copy() for k, v in self.params.items()})

    def digest(self):
        return sha256_text(checkpoint_text(self))

    def n_parameters(self):
        return sum(v.size for v in self.params.values())

    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size < 1:
            raise SequenceTooLong("need a non-empty 1-D token sequence")
        if tokens.size > self.config.max_seq_len:
            raise SequenceTooLong(f"{tokens.size} tokens exceed max_seq_len={self.config.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise TokenOutOfRange(f"token ids must lie in [0, {self.config.vocab_size})")
        return tokens

    # -- forward -------------------------------------------------------------

    def _run(self, tokens, start=0, past=None, hook=None, keep=None):
        """Core forward over a (B, T) token block occupying positions start..start+T-1.

        ``past`` is a per-layer list of cached (K, V) head tensors which is
        extended in place; ``keep`` collects intermediates for backprop.
        Returns logits for every position, shape (B, T, V).
        """
        cfg, P = self.config, self.params
        B, T = tokens.shape
        H, dh = cfg.n_heads, cfg.head_dim
        x = P["tok_emb"][tokens] + P["pos_emb"][start : start + T]
        if hook is not None:
            x = hook(SiteId(SiteKind.EMBEDDING, 0), x)
        if keep is not None:
            keep["tokens"] = tokens
        for l in range(cfg.n_layers):
            p = f"l{l}."
            h1, ln1 = _layernorm(x, P[p + "ln1_g"], P[p + "ln1_b"])
            q = (h1 @ P[p + "w_q"] + P[p + "b_q"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = (h1 @ P[p + "w_k"] + P[p + "b_k"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            v = (h1 @ P[p + "w_v"] + P[p + "b_v"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            if past is not None:
                if len(past) > l:
                    pk, pv = past[l]
                    k = np.concatenate([pk, k], axis=2)
                    v = np.concatenate([pv, v], axis=2)
                    past[l] = (k, v)
                else:
                    past.append((k, v))
            S = k.shape[2]
            scores = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
            qpos = np.arange(start, start + T)[:, None]
            kpos = np.arange(S)[None, :]
            scores = np.where(kpos <= qpos, scores, -np.inf)
            probs = _softmax(scores)
            ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            attn = ctx @ P[p + "w_o"] + P[p + "b_o"]
            if hook is not None:
                attn = hook(SiteId(SiteKind.ATTN, l), attn)
            x_mid = x + attn
            h2, ln2 = _layernorm(x_mid, P[p + "ln2_g"], P[p + "ln2_b"])
            u = h2 @ P[p + "w_in"] + P[p + "b_in"]
            a = _gelu(u)
            ff = a @ P[p + "w_out"] + P[p + "b_out"]
            if hook is not None:
                ff = hook(SiteId(SiteKind.FFN, l), ff)
            x_out = x_mid + ff
            if hook is not None:
                x_out = hook(SiteId(SiteKind.HIDDEN, l), x_out)
            if keep is not None:
                keep[l] = dict(h1=h1, ln1=ln1, q=q, k=k, v=v, probs=probs, ctx=ctx, h2=h2, ln2=ln2, u=u, a=a)
            x = x_out
        hf, lnf = _layernorm(x, P["lnf_g"], P["lnf_b"])
        W_u = P["tok_emb"].T if cfg.tied else P["unembed"]
        logits = hf @ W_u + P["head_b"]
        if keep is not None:
            keep["hf"] = hf
            keep["lnf"] = lnf
        return logits

    def forward(self, tokens, intervene=None):
        """Logits at every position and the last-position trace.

        When ``intervene`` is given, its active sites are replaced at the last
        position before flowing onward.
        """
        tokens = self._check_tokens(tokens)
        trace = TraceRecord()
        hook = _Hook(intervene, trace, tokens.size - 1)
        logits = self._run(tokens[None, :], hook=hook)[0]
        trace.logits = logits[-1].copy()
        return logits, trace

    def greedy_decode(self, prompt, max_new, intervene=None):
        """Append ``max_new`` argmax tokens to ``prompt``.

        The interventor fires once, while the prompt is processed; generated
        positions reuse cached keys/values and are never intervened.
        """
        prompt = self._check_tokens(prompt)
        if max_new < 0:
            raise ValueError("max_new must be >= 0")
        if prompt.size + max_new > self.config.max_seq_len:
            raise SequenceTooLong(
                f"prompt ({prompt.size}) + max_new ({max_new}) exceeds max_seq_len={self.config.max_seq_len}"
            )
        out = [int(t) for t in prompt]
        if max_new == 0:
            return out
        past = []
        hook = _Hook(intervene, None, prompt.size - 1)
        logits = self._run(prompt[None, :], past=past, hook=hook)[0, -1]
        for step in range(max_new):
            nxt = int(np.argmax(logits))
            out.append(nxt)
            if step + 1 == max_new:
                break
            logits = self._run(np.array([[nxt]]), start=len(out) - 1, past=past)[0, -1]
        return out

    # -- training ------------------------------------------------------------

    def loss_and_grads(self, tokens, answer_pos, answer_tok):
        """Mean cross-entropy of ``answer_tok`` at ``answer_pos`` and its gradient.

        ``tokens`` is a (B, T) int array; returns ``(loss, grads)`` where
        ``grads`` has the same keys as ``params``.
        """
        cfg, P = self.config, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        answer_pos = np.asarray(answer_pos, dtype=np.int64)
        answer_tok = np.asarray(answer_tok, dtype=np.int64)
        B, T = tokens.shape
        H, dh, d = cfg.n_heads, cfg.head_dim, cfg.d_model
        keep = {}
        logits_all = self._run(tokens, keep=keep)
        rows = np.arange(B)
        logits = logits_all[rows, answer_pos]
        probs = _softmax(logits)
        loss = float(-np.mean(np.log(probs[rows, answer_tok] + 1e-300)))

        grads = {k: np.zeros_like(v) for k, v in P.items()}
        dlogits = probs.copy()
        dlogits[rows, answer_tok] -= 1.0
        dlogits /= B
        hf_sel = keep["hf"][rows, answer_pos]
        W_u = P["tok_emb"].T if cfg.tied else P["unembed"]
        if cfg.tied:
            grads["tok_emb"] += dlogits.T @ hf_sel
        else:
            grads["unembed"] = hf_sel.T @ dlogits
        grads["head_b"] = dlogits.sum(axis=0)
        dhf = np.zeros((B, T, d))
        dhf[rows, answer_pos] = dlogits @ W_u.T
        dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_back(dhf, P["lnf_g"], keep["lnf"])

        causal = np.tril(np.ones((T, T), dtype=bool))
        for l in reversed(range(cfg.n_layers)):
            p = f"l{l}."
            c = keep[l]
            # feed-forward
            dff = dx
            grads[p + "b_out"] = dff.reshape(-1, d).sum(axis=0)
            grads[p + "w_out"] = c["a"].reshape(-1, cfg.d_ff).T @ dff.reshape(-1, d)
            da = dff @ P[p + "w_out"].T
            du = da * _gelu_grad(c["u"])
            grads[p + "b_in"] = du.reshape(-1, cfg.d_ff).sum(axis=0)
            grads[p + "w_in"] = c["h2"].reshape(-1, d).T @ du.reshape(-1, cfg.d_ff)
            dh2 = du @ P[p + "w_in"].T
            dxm, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layernorm_back(dh2, P[p + "ln2_g"], c["ln2"])
            dx_mid = dx + dxm
            # attention
            dattn = dx_mid
            grads[p + "b_o"] = dattn.reshape(-1, d).sum(axis=0)
            grads[p + "w_o"] = c["ctx"].reshape(-1, d).T @ dattn.reshape(-1, d)
            dctx = (dattn @ P[p + "w_o"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            probs_l, q, k, v = c["probs"], c["q"], c["k"], c["v"]
            dv = probs_l.transpose(0, 1, 3, 2) @ dctx
            dprobs = dctx @ v.transpose(0, 1, 3, 2)
            dscores = probs_l * (dprobs - (dprobs * probs_l).sum(axis=-1, keepdims=True))
            dscores = np.where(causal, dscores, 0.0) / math.sqrt(dh)
            dq = dscores @ k
            dk = dscores.transpose(0, 1, 3, 2) @ q
            h1 = c["h1"].reshape(-1, d)
            dh1 = np.zeros((B, T, d))
            for name, g in (("q", dq), ("k", dk), ("v", dv)):
                g2 = g.transpose(0, 2, 1, 3).reshape(-1, d)
                grads[p + "w_" + name] = h1.T @ g2
                grads[p + "b_" + name] = g2.sum(axis=0)
                dh1 += (g2 @ P[p + "w_" + name].T).reshape(B, T, d)
            dxa, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layernorm_back(dh1, P[p + "ln1_g"], c["ln1"])
            dx = dx_mid + dxa
        np.add.at(grads["tok_emb"], tokens, dx)
        grads["pos_emb"][:T] += dx.sum(axis=0)
        return loss, grads


# --- training ---------------------------------------------------------------


def _validate_dataset(model, dataset):
    cfg = model.config
    items = []
    for i, item in enumerate(dataset):
        try:
            tokens, pos, ans = item
        except (TypeError, ValueError):
            raise InvalidDataset(f"item {i} is not (tokens, answer_position, answer_token)") from None
        tokens = tuple(int(t) for t in tokens)
        if not 1 <= len(tokens) <= cfg.max_seq_len:
            raise InvalidDataset(f"item {i}: length {len(tokens)} outside [1, {cfg.max_seq_len}]")
        if not 0 <= pos < len(tokens):
            raise InvalidDataset(f"item {i}: answer position {pos} outside the sequence")
        if min(tokens) < 0 or max(tokens) >= cfg.vocab_size or not 0 <= ans < cfg.vocab_size:
            raise InvalidDataset(f"item {i}: token id out of range")
        items.append((tokens, int(pos), int(ans)))
    if not items:
        raise InvalidDataset("empty dataset")
    return items


def _batches(items, batch_size, rng):
    """Endless stream of same-length minibatches in a seeded fixed order."""
    by_len = {}
    for idx, (tokens, _, _) in enumerate(items):
        by_len.setdefault(len(tokens), []).append(idx)
    lengths = sorted(by_len)
    while True:
        plan = []
        for n in lengths:
            idx = np.array(by_len[n])[rng.permutation(len(by_len[n]))]
            plan += [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]
        for j in rng.permutation(len(plan)):
            yield plan[j]


def train(model, dataset, hyper=None):
    """Adam on answer-position cross-entropy.  Returns ``(trained_copy, losses)``."""
    hyper = hyper or TrainConfig()
    if hyper.steps < 0:
        raise InvalidDataset("steps must be >= 0")
    items = _validate_dataset(model, dataset)
    model = model.copy()
    if hyper.steps == 0:
        return model, []
    tokens_all = [np.array(t, dtype=np.int64) for t, _, _ in items]
    pos_all = np.array([p for _, p, _ in items])
    ans_all = np.array([a for _, _, a in items])
    rng = np.random.default_rng(hyper.seed)
    stream = _batches(items, hyper.batch_size, rng)
    b1, b2 = hyper.betas
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    s = {k: np.zeros_like(v) for k, v in model.params.items()}
    losses = []
    for step in range(1, hyper.steps + 1):
        idx = next(stream)
        batch = np.stack([tokens_all[i] for i in idx])
        loss, grads = model.loss_and_grads(batch, pos_all[idx], ans_all[idx])
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        losses.append(loss)
        c1 = 1.0 - b1**step
        c2 = 1.0 - b2**step
        for k, g in grads.items():
            m[k] = b1 * m[k] + (1 - b1) * g
            s[k] = b2 * s[k] + (1 - b2) * g * g
            model.params[k] -= hyper.lr * (m[k] / c1) / (np.sqrt(s[k] / c2) + hyper.eps)
    return model, losses


# --- checkpoints ------------------------------------------------------------

_CONFIG_KEYS = ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len", "seed", "tied")


def checkpoint_text(model):
    cfg = model.config
    lines = [CHECKPOINT_MAGIC]
    for key in _CONFIG_KEYS:
        lines.append(f"{key} {int(getattr(cfg, key))}")
    out = "\n".join(lines) + "\n"
    parts = [out]
    for name, shape in param_shapes(cfg).items():
        parts.append(f"param {name}\n")
        parts.append(format_matrix(model.params[name].reshape(shape[0], -1) if len(shape) == 2 else model.params[name][None, :]))
    parts.append("end\n")
    return "".join(parts)


def save_checkpoint(model, path):
    atomic_write_text(path, checkpoint_text(model))


def parse_checkpoint(text, path=None):
    reader = LineReader(text, path)
    try:
        if reader.next("header").strip() != CHECKPOINT_MAGIC:
            raise FormatVersionMismatch(f"{path or 'checkpoint'}: expected header {CHECKPOINT_MAGIC!r}")
        values = {}
        for key in _CONFIG_KEYS:
            parts = reader.next(key).split()
            if len(parts) != 2 or parts[0] != key:
                raise reader.error(f"expected '{key} <value>'")
            values[key] = int(parts[1])
        cfg = ModelConfig(**{**values, "tied": bool(values["tied"])})
        try:
            cfg.validate()
        except InvalidConfig as exc:
            raise reader.error(str(exc)) from None
        params = {}
        for name, shape in param_shapes(cfg).items():
            if reader.next(f"param {name}").split() != ["param", name]:
                raise reader.error(f"expected 'param {name}'")
            M = read_matrix(reader)
            if M.size != int(np.prod(shape)):
                raise reader.error(f"parameter {name} has {M.size} values, expected shape {shape}")
            params[name] = M.reshape(shape)
        if reader.next("end marker").strip() != "end":
            raise reader.error("expected 'end'")
    except ParseError as exc:
        raise FormatVersionMismatch(f"corrupt or truncated checkpoint: {exc}") from exc
    return ToyTransformer(cfg, params)


def load_checkpoint(path):
    return parse_checkpoint(read_text(path), path=path)


def with_seed(config, seed):
    return replace(config, seed=seed)
