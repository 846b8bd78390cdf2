"""``incline`` command line: one subcommand per pipeline stage.

Every subcommand writes into ``--out`` only, through a staging directory
that is moved into place on success, and leaves a ``manifest.txt`` with
the resolved flags and input digests.  Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import __version__, align, corpus, eval as ev, experiment
from .errors import InclineError
from .intervene import InterventionConfig, Mode, fit_caa, load_steering, make_interventor, save_steering
from .model import (
    ModelConfig,
    SiteId,
    SiteKind,
    TrainConfig,
    all_sites,
    load_checkpoint,
    new_transformer,
    save_checkpoint,
    train,
)
from .textio import atomic_write_text, sha256_file, staged_dir

MANIFEST = "manifest.txt"


class UsageError(Exception):
    pass


# --- flag parsing ----------------------------------------------------------------


def parse_sites(text, allow_all=True):
    text = text.strip().lower()
    if allow_all and text == "all":
        return tuple(SiteKind)
    kinds = []
    for part in text.split(","):
        try:
            kinds.append(SiteKind(part.strip()))
        except ValueError:
            names = ", ".join(k.value for k in SiteKind)
            raise UsageError(f"unknown site {part!r} (choose from {names})") from None
    if not kinds:
        raise UsageError("no sites given")
    return tuple(dict.fromkeys(kinds))


def parse_layers(text, n_layers=None):
    if text.strip().lower() == "all":
        return None
    try:
        layers = frozenset(int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"--layers takes 'all' or comma-separated integers, got {text!r}") from None
    if n_layers is not None and any(not 0 <= l < n_layers for l in layers):
        raise UsageError(f"layers must lie in [0, {n_layers})")
    return layers


def parse_grid(text):
    try:
        return ev.parse_grid(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _sites_for(kinds, n_layers):
    return [s for s in all_sites(n_layers) if s.kind in kinds]


def _need(path, flag):
    # a missing input is a runtime failure (exit 1), not a malformed command line
    if not os.path.exists(path):
        raise FileNotFoundError(f"{flag}: {path} does not exist")
    return path


# --- parser -------------------------------------------------------------------------


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults for every optional flag, but not for required or unset ones."""

    def _get_help_string(self, action):
        if action.required or action.default is None:
            return action.help
        return super()._get_help_string(action)


def _common(p, seed=True):
    p.add_argument("--out", required=True, help="output directory")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument(
        "--no-timestamp",
        action="store_true",
        help="leave wall-clock values out of outputs so reruns are byte-identical",
    )


def _intervention_flags(p, alpha=0.0):
    p.add_argument("--alignment", help="alignment file (incline-align v1)")
    p.add_argument("--steering", help="steering file (incline-caa v1); selects the static-offset baseline")
    p.add_argument("--alpha", type=float, default=alpha, help="intervention strength")
    p.add_argument("--sites", default="hidden", help="comma list of hidden,attn,ffn,emb")
    p.add_argument("--layers", default="all", help="'all' or comma-separated layer indices")


def _ridge_flags(p):
    p.add_argument(
        "--ridge",
        type=float,
        default=0.0,
        help="absolute ridge; 0 escalates only when the Gram matrix is singular",
    )
    p.add_argument(
        "--ridge-rel",
        type=float,
        default=0.0,
        help="extra ridge as a multiple of trace(S^T S)/d per site",
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="incline", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"incline {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    fmt = _HelpFormatter

    p = sub.add_parser("gen-data", help="generate the bilingual corpora", formatter_class=fmt)
    _common(p)
    p.add_argument("--task", choices=[t.value for t in corpus.Task], default="majority", help="task family")
    p.add_argument("--n-train", type=int, default=2000, help="language-A training items")
    p.add_argument("--n-val", type=int, default=200, help="validation items per language")
    p.add_argument("--n-test", type=int, default=500, help="test items per language")
    p.add_argument("--n-parallel", type=int, default=500, help="parallel sentence pairs")
    p.add_argument("--seq-len", type=int, default=None, help="content length; unset means 9 for majority, 8 for antisymmetric")
    p.add_argument("--mapping-seed", type=int, default=0, help="seed of the A-to-B token permutation")
    p.add_argument("--domain", choices=[d.value for d in corpus.Domain], default="task", help="parallel corpus domain")

    p = sub.add_parser("train-model", help="train the toy transformer on language A", formatter_class=fmt)
    _common(p)
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--steps", type=int, default=1500, help="Adam steps")
    p.add_argument("--lr", type=float, default=3e-3, help="learning rate")
    p.add_argument("--batch-size", type=int, default=64, help="items per step")
    p.add_argument("--d-model", type=int, default=32, help="residual width")
    p.add_argument("--n-layers", type=int, default=2, help="transformer blocks")
    p.add_argument("--n-heads", type=int, default=4, help="attention heads")
    p.add_argument("--d-ff", type=int, default=64, help="feed-forward width")

    p = sub.add_parser("extract", help="last-token representations of a parallel corpus", formatter_class=fmt)
    _common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--parallel", required=True, help="parallel corpus file")
    p.add_argument("--sites", default="all", help="'all' or comma list of hidden,attn,ffn,emb")

    p = sub.add_parser("fit-align", help="fit one alignment matrix per site", formatter_class=fmt)
    _common(p)
    p.add_argument("--reps", required=True, help="directory written by extract")
    p.add_argument("--model", help="checkpoint whose digest is recorded in the alignment file")
    _ridge_flags(p)

    p = sub.add_parser("fit-caa", help="fit static steering vectors", formatter_class=fmt)
    _common(p)
    p.add_argument("--reps", required=True, help="directory written by extract")

    p = sub.add_parser("eval", help="task accuracy with an optional intervention", formatter_class=fmt)
    _common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="task corpus file")
    _intervention_flags(p)

    p = sub.add_parser("grid-alpha", help="validation accuracy over an alpha grid", formatter_class=fmt)
    _common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--data", required=True, help="validation corpus file")
    p.add_argument("--grid", default="-1:1:0.1", help="lo:hi:step, endpoints inclusive")
    _intervention_flags(p)

    p = sub.add_parser("ablate", help="site / layer / data-size / domain ablations", formatter_class=fmt)
    _common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--axis", required=True, choices=ev.Axis.ALL, help="ablation axis")
    p.add_argument("--test", required=True, help="test corpus file")
    p.add_argument("--val", help="validation corpus; when given each row picks its own alpha")
    p.add_argument("--grid", default="-1:1:0.1", help="lo:hi:step used with --val")
    p.add_argument("--alignment", help="alignment file (site and layer axes)")
    p.add_argument("--steering", help="steering file instead of --alignment")
    p.add_argument("--alpha", type=float, default=1.0, help="alpha when --val is absent")
    p.add_argument("--parallel", help="parallel corpus (data_size axis; 'task' corpus for the domain axis)")
    p.add_argument("--shifted", help="shifted-domain parallel corpus (domain axis)")
    p.add_argument("--sizes", default=",".join(str(n) for n in ev.DATA_SIZES), help="prefix sizes for data_size")
    _ridge_flags(p)

    p = sub.add_parser("probe", help="orthogonal probe pair and 2-D projections", formatter_class=fmt)
    _common(p)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--parallel", required=True, help="parallel corpus file")
    _intervention_flags(p, alpha=1.0)
    p.add_argument("--steps", type=int, default=2000, help="gradient steps per probe")
    p.add_argument("--lr", type=float, default=0.1, help="probe learning rate")
    return parser


# --- manifest ----------------------------------------------------------------------------

_PATH_FLAGS = ("data", "model", "parallel", "reps", "alignment", "steering", "test", "val", "shifted")


def manifest_text(args, inputs, wall):
    lines = ["incline-manifest v1", f"subcommand {args.command}", f"tool_version {__version__}"]
    lines.append(f"seed {getattr(args, 'seed', 0)}")
    for key in sorted(vars(args)):
        if key in ("command", "out", "func"):
            continue
        lines.append(f"flag {key} {getattr(args, key)}")
    for name, path in sorted(inputs.items()):
        lines.append(f"input {name} {sha256_file(path)}")
    if wall:
        for key, value in wall.items():
            lines.append(f"{key} {value:.6f}")
    return "\n".join(lines) + "\n"


def _input_files(args):
    found = {}
    for key in _PATH_FLAGS:
        path = getattr(args, key, None)
        if not path:
            continue
        if os.path.isdir(path):
            for name in sorted(os.listdir(path)):
                if name != MANIFEST and not name.startswith("."):
                    found[f"{key}/{name}"] = os.path.join(path, name)
        else:
            found[key] = path
    return found


# --- subcommands --------------------------------------------------------------------------


def _write(stage, name, text):
    atomic_write_text(os.path.join(stage, name), text)


def cmd_gen_data(args, stage, wall):
    kw = dict(
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        n_parallel=args.n_parallel,
        mapping_seed=args.mapping_seed,
        domain_tag=args.domain,
    )
    if args.seq_len is not None:
        kw["seq_len"] = args.seq_len
    try:
        spec = experiment.default_spec(args.task, args.seed, **kw)
        data = corpus.gen_bilingual(spec)
    except corpus.InvalidSpec as exc:
        raise UsageError(str(exc)) from None
    corpus.save_spec(os.path.join(stage, "spec.txt"), spec)
    for name in ("a_train", "a_val", "a_test", "b_val", "b_test"):
        corpus.save_corpus(os.path.join(stage, f"{name}.txt"), getattr(data, name))
    corpus.save_parallel(os.path.join(stage, "parallel.txt"), data.parallel)


def cmd_train_model(args, stage, wall):
    spec = corpus.load_spec(_need(os.path.join(args.data, "spec.txt"), "--data"))
    train_set = corpus.load_corpus(os.path.join(args.data, "a_train.txt"), spec.vocab_size)
    cfg = ModelConfig(
        vocab_size=spec.vocab_size,
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ff=args.d_ff,
        seed=args.seed,
    )
    try:
        cfg.validate()
    except InclineError as exc:
        raise UsageError(str(exc)) from None
    hyper = TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    model, losses = train(new_transformer(cfg), train_set.items, hyper)
    save_checkpoint(model, os.path.join(stage, "model.ckpt"))
    _write(stage, "loss.csv", ev.csv_text(["step", "loss"], enumerate(losses, 1)))


def cmd_extract(args, stage, wall):
    model = load_checkpoint(_need(args.model, "--model"))
    par = corpus.load_parallel(_need(args.parallel, "--parallel"), model.config.vocab_size)
    sites = _sites_for(parse_sites(args.sites), model.config.n_layers)
    align.save_reps(os.path.join(stage, "reps_src.txt"), align.extract_reps(model, par.sources(), sites))
    align.save_reps(os.path.join(stage, "reps_tgt.txt"), align.extract_reps(model, par.targets(), sites))
    _write(stage, "langs.txt", f"src {par.src}\ntgt {par.tgt}\n")


def _load_rep_pair(path):
    _need(path, "--reps")
    rs = align.load_reps(os.path.join(path, "reps_src.txt"))
    rt = align.load_reps(os.path.join(path, "reps_tgt.txt"))
    langs = {"src": "B", "tgt": "A"}
    lang_file = os.path.join(path, "langs.txt")
    if os.path.exists(lang_file):
        with open(lang_file, encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if len(parts) == 2:
                    langs[parts[0]] = parts[1]
    return rs, rt, langs["src"], langs["tgt"]


def cmd_fit_align(args, stage, wall):
    if args.ridge < 0 or args.ridge_rel < 0:
        raise UsageError("ridge values must be >= 0")
    rs, rt, src, tgt = _load_rep_pair(args.reps)
    digest = load_checkpoint(args.model).digest() if args.model else "-"
    aset = align.fit_alignment(rs, rt, args.ridge, src, tgt, digest, ridge_rel=args.ridge_rel)
    align.save_alignment(os.path.join(stage, "alignment.txt"), aset)
    wall["fit_seconds"] = aset.fit_seconds


def cmd_fit_caa(args, stage, wall):
    rs, rt, src, tgt = _load_rep_pair(args.reps)
    save_steering(os.path.join(stage, "steering.txt"), fit_caa(rs, rt, src, tgt))


def _payload(args, model):
    if args.alignment and args.steering:
        raise UsageError("give either --alignment or --steering, not both")
    if args.alignment:
        return Mode.INCLINE, align.load_alignment(_need(args.alignment, "--alignment"), model)
    if args.steering:
        return Mode.CAA, load_steering(_need(args.steering, "--steering"))
    return Mode.NONE, None


def _interventor(args, model, alpha):
    mode, payload = _payload(args, model)
    sites = parse_sites(args.sites, allow_all=True)
    layers = parse_layers(args.layers, model.config.n_layers)
    if mode is Mode.NONE:
        if alpha != 0:
            raise UsageError("--alpha needs --alignment or --steering")
        return mode, payload, sites, layers, None
    cfg = InterventionConfig(alpha=alpha, sites=frozenset(sites), layers=layers, mode=mode)
    return mode, payload, sites, layers, make_interventor(payload, cfg, model.config.n_layers)


def cmd_eval(args, stage, wall):
    model = load_checkpoint(_need(args.model, "--model"))
    data = corpus.load_corpus(_need(args.data, "--data"), model.config.vocab_size)
    *_, iv = _interventor(args, model, args.alpha)
    result = ev.eval_task(model, data, iv)
    values = {"lang": result.lang, "task": data.task.value, "n_items": result.n, "accuracy": result.accuracy}
    _write(stage, "metrics.txt", ev.report_text(values))
    _write(stage, "items.csv", ev.items_csv(result))
    wall["median_latency_seconds"] = result.median_latency()


def cmd_grid_alpha(args, stage, wall):
    model = load_checkpoint(_need(args.model, "--model"))
    data = corpus.load_corpus(_need(args.data, "--data"), model.config.vocab_size)
    grid = parse_grid(args.grid)
    mode, payload, sites, layers, _ = _interventor(args, model, 0.0)
    if mode is Mode.NONE:
        raise UsageError("grid-alpha needs --alignment or --steering")
    rep = ev.grid_search_alpha(model, payload, data, grid, sites, layers, mode)
    _write(stage, "grid.csv", rep.csv_text())
    values = {
        "lang": data.lang,
        "n_items": len(data),
        "n_alphas": len(grid),
        "baseline": rep.baseline,
        "best_alpha": rep.best_alpha,
        "best_accuracy": rep.best_accuracy,
        **rep.config,
    }
    _write(stage, "report.txt", ev.report_text(values))


def cmd_ablate(args, stage, wall):
    model = load_checkpoint(_need(args.model, "--model"))
    vocab = model.config.vocab_size
    test = corpus.load_corpus(_need(args.test, "--test"), vocab)
    val = corpus.load_corpus(_need(args.val, "--val"), vocab) if args.val else None
    grid = parse_grid(args.grid)
    if args.alignment and args.steering:
        raise UsageError("give either --alignment or --steering, not both")
    mode = Mode.CAA if args.steering else Mode.INCLINE
    payload = None
    if args.axis in (ev.Axis.SITE, ev.Axis.LAYER):
        if args.alignment:
            payload = align.load_alignment(_need(args.alignment, "--alignment"), model)
        elif args.steering:
            payload = load_steering(_need(args.steering, "--steering"))
        else:
            raise UsageError(f"the {args.axis} axis needs --alignment or --steering")
    parallel = shifted = None
    if args.axis in (ev.Axis.DATA_SIZE, ev.Axis.DOMAIN):
        if not args.parallel:
            raise UsageError(f"the {args.axis} axis needs --parallel")
        parallel = corpus.load_parallel(_need(args.parallel, "--parallel"), vocab)
    domains = None
    if args.axis == ev.Axis.DOMAIN:
        if not args.shifted:
            raise UsageError("the domain axis needs --shifted")
        shifted = corpus.load_parallel(_need(args.shifted, "--shifted"), vocab)
        domains = {"task": parallel, "shifted": shifted}
    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
    except ValueError:
        raise UsageError(f"--sizes takes comma-separated integers, got {args.sizes!r}") from None
    if parallel is not None and args.axis == ev.Axis.DATA_SIZE and max(sizes) > len(parallel):
        raise UsageError(f"--parallel has {len(parallel)} pairs; --sizes asks for {max(sizes)}")
    table = ev.ablate(
        model,
        payload,
        test,
        args.axis,
        alpha=args.alpha,
        val=val,
        grid=grid,
        mode=mode,
        parallel=parallel,
        domains=domains,
        sizes=sizes,
        ridge=args.ridge,
        ridge_rel=args.ridge_rel,
    )
    _write(stage, f"ablation_{args.axis}.csv", table.csv_text(timings=not args.no_timestamp))
    values = {"axis": args.axis, "baseline": table.baseline, "argmax": table.argmax()}
    if args.axis == ev.Axis.SITE:
        values["hidden_is_argmax"] = table.argmax() == SiteKind.HIDDEN.value
    _write(stage, "report.txt", ev.report_text(values))


def cmd_probe(args, stage, wall):
    model = load_checkpoint(_need(args.model, "--model"))
    par = corpus.load_parallel(_need(args.parallel, "--parallel"), model.config.vocab_size)
    last = SiteId(SiteKind.HIDDEN, model.config.n_layers - 1)
    src = align.extract_reps(model, par.sources(), [last]).sites[last]
    tgt = align.extract_reps(model, par.targets(), [last]).sites[last]
    X = np.vstack([src, tgt])
    y = np.r_[np.zeros(len(src)), np.ones(len(tgt))]
    probes = ev.fit_probe_pair(X, y, steps=args.steps, lr=args.lr)
    points = ev.project2d(src, probes, [par.src] * len(src)) + ev.project2d(tgt, probes, [par.tgt] * len(tgt))
    values = {
        "dot_w1_w2": float(probes.w1 @ probes.w2),
        "probe1_heldout_accuracy": probes.acc1,
        "probe2_heldout_accuracy": probes.acc2,
    }
    mode, payload, sites, layers, iv = _interventor(args, model, args.alpha)
    if iv is not None:
        moved = ev.intervened_reps(model, par.sources(), payload, iv.config, last)
        steered = ev.project2d(moved, probes, [f"{par.src}+{mode.value}"] * len(moved))
        points += steered
        c_src = ev.centroid(points[: len(src)])
        c_tgt = ev.centroid(points[len(src) : len(src) + len(tgt)])
        c_new = ev.centroid(steered)
        values["centroid_distance_before"] = float(np.linalg.norm(c_src - c_tgt))
        values["centroid_distance_after"] = float(np.linalg.norm(c_new - c_tgt))
    _write(stage, "probe.txt", ev.report_text(values, {"w": ev.csv_text(["w1", "w2"], zip(probes.w1, probes.w2))}))
    _write(stage, "projection.csv", ev.csv_text(["x", "y", "label"], points))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-model": cmd_train_model,
    "extract": cmd_extract,
    "fit-align": cmd_fit_align,
    "fit-caa": cmd_fit_caa,
    "eval": cmd_eval,
    "grid-alpha": cmd_grid_alpha,
    "ablate": cmd_ablate,
    "probe": cmd_probe,
}


def _join_grid(argv):
    # "--grid -1:1:0.1" would otherwise read the value as an option
    out = []
    for i, a in enumerate(argv):
        if i and argv[i - 1] == "--grid" and a.startswith("-"):
            out[-1] = f"--grid={a}"
        else:
            out.append(a)
    return out


def dispatch(argv=None):
    parser = build_parser()
    argv = _join_grid(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for bad usage
        return int(exc.code or 0)
    t0 = time.perf_counter()
    wall = {}
    try:
        inputs = _input_files(args)
        with staged_dir(args.out) as stage:
            COMMANDS[args.command](args, stage, wall)
            if not args.no_timestamp:
                wall["wall_seconds"] = time.perf_counter() - t0
            else:
                wall.clear()
            _write(stage, MANIFEST, manifest_text(args, inputs, wall))
    except UsageError as exc:
        print(f"incline {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (InclineError, OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"incline {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
