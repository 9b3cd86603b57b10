"""Command-line interface: ``selgen {synth,train,generate,filter,evaluate,inspect}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
Every run writes its fully resolved configuration as JSON next to its
outputs; ``--config FILE`` replays such a file (explicit flags still win).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import CorpusFormatError, load_corpus, save_corpus
from .model import CheckpointError, Model, load_checkpoint, save_checkpoint

log = logging.getLogger("selgen")

# flags that mirror published defaults, and the desk-scale overrides
PUBLISHED_DEFAULTS = {"batch_size": 100, "hidden": 500, "embed": 500, "gamma": 8.5, "ensemble": 5}
DESK_PRESET = {"batch_size": 10, "hidden": 64, "embed": 64, "ensemble": 1}

# keys never stored in or restored from a run config
_TRANSIENT = {"config", "func", "verbose", "_subparser"}


class UsageError(Exception):
    """Bad invocation that argparse cannot see (for example a missing file)."""


# ------------------------------------------------------------------ helpers


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return p


def _config_dict(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _TRANSIENT}


def _write_config(args: argparse.Namespace, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_config_dict(args), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def _load_models(paths: list[str] | None) -> list[Model]:
    if not paths:
        raise UsageError("--checkpoint is required")
    return [load_checkpoint(_require_file(p, "--checkpoint")) for p in paths]


# --------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    from .synth import SynthProfile, synth_generate

    if args.out is None:
        raise UsageError("--out is required")
    profile = SynthProfile(records_per_scenario=args.records, salient_count=args.salient, noise=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sizes = {"train": args.n, "dev": args.dev_n, "test": args.test_n}
    # disjoint seed streams per split
    for offset, (split, n) in enumerate(sizes.items()):
        if n > 0:
            save_corpus(synth_generate(args.seed + offset * 100_003, n, profile), out / f"{split}.jsonl")
    _write_config(args, out / "synth_config.json")
    _print_json({"out": str(out), **{f"n_{k}": v for k, v in sizes.items()}})
    return 0


# --------------------------------------------------------------------- train


def _resolve_train(args) -> None:
    preset = DESK_PRESET if args.desk else {}
    for key, default in PUBLISHED_DEFAULTS.items():
        if getattr(args, key) is None:
            setattr(args, key, preset.get(key, default))


def cmd_train(args) -> int:
    from .training import TrainConfig, ensemble_train, train

    if args.out is None:
        raise UsageError("--out is required")
    corpus_path = _require_file(args.corpus, "--corpus")
    dev_path = _require_file(args.dev, "--dev")
    if args.ensemble < 1:
        raise UsageError("--ensemble must be >= 1")
    corpus, dev = load_corpus(corpus_path), load_corpus(dev_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(args, out / "run_config.json")

    model_cfg = dict(
        hidden_size=args.hidden,
        embed_size=args.embed,
        align_size=args.align,
        gamma=args.gamma,
        aligner_mode="basic" if args.aligner == "basic" else "coarse_to_fine",
        use_encoder=not args.no_encoder,
    )
    tcfg = TrainConfig(
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        max_iters=args.max_iters,
        eval_every=args.eval_every,
        patience=args.patience,
        clip_norm=args.clip_norm,
        lr=args.lr,
        seed=args.seed,
        min_count=args.min_count,
    )
    if args.ensemble == 1:
        results = [train(corpus, dev, model_cfg, tcfg, out_dir=out)]
    else:
        results = ensemble_train(corpus, dev, model_cfg, tcfg, k=args.ensemble, out_dir=out)

    members = []
    for i, res in enumerate(results):
        suffix = "" if len(results) == 1 else f"_{i}"
        ckpt = out / f"model{suffix}.json"
        save_checkpoint(res.best, ckpt)
        res.log.save(out / f"train_log{suffix}.json")
        members.append({"checkpoint": str(ckpt), "iterations": res.iterations, "best": res.log.best})
    report = {"model": results[0].best.config.to_json(), "train": _config_dict(args), "members": members}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _print_json(report)
    return 0


# ----------------------------------------------------------------- generate


def _decode_config(args):
    from .inference import DecodeConfig

    spec = args.decode
    mode = spec[0]
    try:
        nums = [int(x) for x in spec[1:]]
    except ValueError:
        raise UsageError(f"--decode: non-integer argument in {' '.join(spec)}") from None
    if mode == "greedy" and not nums:
        return DecodeConfig(max_length=args.max_length, mode="greedy")
    if mode == "beam" and len(nums) == 1:
        return DecodeConfig(max_length=args.max_length, mode="beam", beam_width=nums[0])
    if mode == "knn" and len(nums) in (0, 2):
        m, k = nums or (2, 1)
        return DecodeConfig(max_length=args.max_length, mode="knn", beam_width=m, neighbors=k)
    raise UsageError("--decode expects 'greedy', 'beam M' or 'knn M K'")


def cmd_generate(args) -> int:
    from .evaluation import export_alignment
    from .inference import NeighborIndex, decode_corpus, selected_records

    corpus = load_corpus(_require_file(args.corpus, "--corpus"))
    try:
        dcfg = _decode_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    models = _load_models(args.checkpoint)
    index = None
    if dcfg.mode == "knn":
        train_corpus = load_corpus(_require_file(args.train_corpus, "--train-corpus"))
        index = NeighborIndex.from_corpus(train_corpus, models[0].feature_spec)

    results = decode_corpus(models, corpus, dcfg, index, gold_selection=args.gold_selection, workers=args.workers)
    lines = [" ".join(r.words) for r in results]
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        _write_config(args, out.with_name(out.name + ".config.json"))
    else:
        for line in lines:
            print(line)

    if args.select:
        with open(args.select, "w", encoding="utf-8") as fh:
            for s, r in zip(corpus, results):
                chosen = selected_records(r.trace) if len(r.trace) else set()
                if args.gold_selection:
                    # trace columns index the gold subset; map back to the full record list
                    subset = sorted(s.gold_selection)
                    chosen = {subset[j] for j in chosen}
                fh.write(json.dumps(sorted(chosen)) + "\n")

    if args.alignments:
        adir = Path(args.alignments)
        adir.mkdir(parents=True, exist_ok=True)
        for i, (s, r) in enumerate(zip(corpus, results)):
            if not len(r.trace):
                continue
            recs = s.records if not args.gold_selection else [s.records[j] for j in sorted(s.gold_selection)]
            words = r.words + ([] if r.truncated else ["</s>"])
            export_alignment(r.trace, words, [rec.label() for rec in recs], adir / f"{i:05d}.tsv", svg=args.svg)
    truncated = sum(r.truncated for r in results)
    if truncated:
        log.warning("%d outputs hit the length limit", truncated)
    return 0


def cmd_filter(args) -> int:
    args.decode = ["knn", str(args.beam), str(args.neighbors)]
    return cmd_generate(args)


# ----------------------------------------------------------------- evaluate


def _read_references(path: Path):
    """A corpus file gives references and gold selections; plain text gives references only."""
    text = path.read_text(encoding="utf-8")
    first = next((ln for ln in text.splitlines() if ln.strip()), "")
    if first.lstrip().startswith("{"):
        corpus = load_corpus(path)
        return [list(s.tokens) for s in corpus], [s.gold_selection for s in corpus]
    return [ln.split() for ln in text.splitlines()], None


def cmd_evaluate(args) -> int:
    from .evaluation import evaluation_report

    hyp_path = _require_file(args.hyp, "--hyp")
    refs, gold = _read_references(_require_file(args.ref, "--ref"))
    hyps = [ln.split() for ln in hyp_path.read_text(encoding="utf-8").splitlines()]
    metrics = args.metric or ["sbleu", "cbleu", "f1"]
    predicted = None
    if args.select:
        predicted = [set(json.loads(ln)) for ln in _require_file(args.select, "--select").read_text().splitlines() if ln.strip()]
    f1_possible = predicted is not None and gold is not None and any(g is not None for g in gold)
    if not args.metric and not f1_possible:
        metrics = [m for m in metrics if m != "f1"]
    report = evaluation_report(hyps, refs, predicted, gold, metrics)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        _write_config(args, Path(args.out).with_name(Path(args.out).name + ".config.json"))
    _print_json(report)
    return 0


# ------------------------------------------------------------------ inspect


def cmd_inspect(args) -> int:
    from .evaluation import embedding_neighbors, export_alignment

    model = load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    if not (args.neighbors or args.alignment is not None or args.stats):
        raise UsageError("nothing to inspect: give --neighbors, --alignment or --stats")
    if args.stats:
        rows = []
        for name, t in model.params.items():
            d = t.data
            rows.append({"name": name, "shape": list(d.shape), "norm": float(np.linalg.norm(d)), "mean": float(d.mean()), "std": float(d.std())})
        _print_json({"aligner_mode": model.config.aligner_mode, "use_encoder": model.config.use_encoder, "parameters": rows})
    if args.neighbors:
        word, k = args.neighbors
        try:
            k = int(k)
        except ValueError:
            raise UsageError("--neighbors expects WORD K") from None
        for w, sim in embedding_neighbors(model.params["decoder.E"].data, model.vocab, word, k):
            print(f"{w}\t{sim:.6f}")
    if args.alignment is not None:
        from .inference import DecodeConfig, decode_scenario

        corpus = load_corpus(_require_file(args.corpus, "--corpus"))
        if not 0 <= args.alignment < len(corpus):
            raise UsageError(f"--alignment index {args.alignment} outside corpus of {len(corpus)} scenarios")
        s = corpus[args.alignment]
        r = decode_scenario(s, [model], DecodeConfig(max_length=args.max_length))
        out = Path(args.out or f"alignment_{args.alignment}.tsv")
        words = r.words + ([] if r.truncated else ["</s>"])
        export_alignment(r.trace, words, [rec.label() for rec in s.records], out, svg=args.svg)
        print(out)
    return 0


# ------------------------------------------------------------------- parser


def _add_decode_io(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", nargs="+", required=False, help="one checkpoint, or several for an ensemble")
    p.add_argument("--corpus", help="scenarios to describe (JSON lines)")
    p.add_argument("--train-corpus", help="training corpus for the k-NN neighbor index")
    p.add_argument("--out", help="output file, one description per line (default: stdout)")
    p.add_argument("--gold-selection", action="store_true", help="condition on the gold record subset")
    p.add_argument("--alignments", metavar="DIR", help="write one alignment TSV per scenario")
    p.add_argument("--svg", action="store_true", help="also render alignments as SVG")
    p.add_argument("--select", metavar="FILE", help="write selected record indices, one JSON list per line")
    p.add_argument("--max-length", type=int, default=100)
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="selgen", description="Selective generation from record databases.")
    ap.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="replay a saved run configuration")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic train/dev/test corpora")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n", type=int, default=50, help="training scenarios")
    p.add_argument("--dev-n", type=int, default=10)
    p.add_argument("--test-n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--records", type=int, default=12)
    p.add_argument("--salient", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model or an ensemble")
    p.add_argument("--corpus", help="training corpus")
    p.add_argument("--dev", help="development corpus for model selection")
    p.add_argument("--out", help="output directory")
    p.add_argument("--desk", action="store_true", help="desk-scale preset: batch 10, hidden 64, single model")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed", type=int)
    p.add_argument("--align", type=int, help="alignment width (default: hidden)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--aligner", choices=("c2f", "coarse_to_fine", "basic"), default="c2f")
    p.add_argument("--no-encoder", action="store_true", help="use raw record features as the memory")
    p.add_argument("--ensemble", type=int, help="number of models, seeds seed..seed+K-1")
    p.add_argument("--max-epochs", type=float, default=30.0)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="describe scenarios with a trained model")
    _add_decode_io(p)
    p.add_argument("--decode", nargs="+", default=["greedy"], metavar="ARG", help="greedy | beam M | knn M K")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("filter", parents=[common], help="generate with the k-NN beam filter")
    _add_decode_io(p)
    p.add_argument("--beam", type=int, default=2, help="beam width M")
    p.add_argument("--neighbors", type=int, default=1, help="neighbor count K")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("evaluate", parents=[common], help="score generated descriptions")
    p.add_argument("--hyp", help="generated descriptions, one per line")
    p.add_argument("--ref", help="reference corpus (JSON lines) or text file")
    p.add_argument("--select", help="predicted selections from 'generate --select'")
    p.add_argument("--metric", nargs="+", choices=("sbleu", "cbleu", "f1"))
    p.add_argument("--out", help="write the report here as well")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", parents=[common], help="look inside a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--neighbors", nargs=2, metavar=("WORD", "K"))
    p.add_argument("--alignment", type=int, metavar="IDX")
    p.add_argument("--corpus", help="corpus for --alignment")
    p.add_argument("--out", help="alignment output path")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--stats", action="store_true")
    p.add_argument("--max-length", type=int, default=100)
    p.set_defaults(func=cmd_inspect)
    for name, parser in sub.choices.items():
        parser.set_defaults(_subparser=parser)
    return ap


def _parse(ap: argparse.ArgumentParser, argv: list[str] | None) -> argparse.Namespace:
    args = ap.parse_args(argv)
    if args.config:
        try:
            saved = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            ap.error(f"--config: {exc}")
        if saved.get("command") != args.command:
            ap.error(f"--config was written by '{saved.get('command')}', not '{args.command}'")
        # saved values become defaults; flags given on this command line override them
        args._subparser.set_defaults(**{k: v for k, v in saved.items() if k not in _TRANSIENT})
        args = ap.parse_args(argv)
    return args


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = _parse(ap, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.command == "train":
        _resolve_train(args)
    try:
        return args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"selgen {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CorpusFormatError, CheckpointError, ValueError, KeyError, IndexError, OSError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"selgen {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
