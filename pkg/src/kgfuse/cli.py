"""Command-line entry point: synth, train, eval and the three sweeps.

Exit codes: 0 success, 1 usage or input error, 2 diverged run, 3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

from . import harness
from .kgdata import (PERTURBATION_MODES, ConfigError, ParseError, SyntheticConfig, gen_synthetic, load_triples,
                     read_sentences, serialize_triples, write_sentences)
from .training import IntegrityError, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("kgfuse")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_INTERNAL = 0, 1, 2, 3
SWEEP_KEYS = ("seeds", "lr_grid", "coverage_levels", "perturb_modes", "perturb_rates", "synthetic")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.0.0"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror or exc}") from None


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgfuse", description="Knowledge-graph fusion language model: data, training, sweeps.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {tool_version()}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(p, data=True):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (value parsed as JSON when possible)")
        if data:
            p.add_argument("--graph", help="triples TSV")
            p.add_argument("--corpus", help="linked sentences JSONL")
            p.add_argument("--seed", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--learning-rate", type=float)
            p.add_argument("--alpha", type=float)
            p.add_argument("--coverage", type=float)

    p = sub.add_parser("synth", help="generate a synthetic graph and cloze corpus")
    common(p, data=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-sentences", type=int)

    p = sub.add_parser("train", help="train one model")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out sentences")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("heldout", "all"), default="heldout")

    for name, helptext in (("sweep-lr", "learning-rate sweep"), ("sweep-coverage", "subgraph coverage sweep"),
                           ("sweep-perturb", "structural perturbation sweep")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--seeds", type=_ints, help="comma-separated seeds (default 0,1,2)")
        p.add_argument("--grid", type=_floats, help="comma-separated grid values")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        p.add_argument("--no-figures", action="store_true", help="skip the PNG figure")
        if name == "sweep-perturb":
            p.add_argument("--modes", help="comma-separated perturbation modes")
            p.add_argument("--checkpoint", help="evaluate this model instead of training clean ones")
    return parser


def resolve(args, raw: dict) -> dict:
    """Merge the config file with flag overrides (flags win)."""
    merged = dict(raw)
    for item in args.set:
        k, v = _parse_override(item)
        merged[k] = v
    flag_keys = {"seed": "seed", "epochs": "epochs", "learning_rate": "learning_rate", "alpha": "alpha",
                 "coverage": "coverage", "n_sentences": "n_sentences", "seeds": "seeds"}
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            merged[key] = value
    return merged


def split_config(merged: dict) -> tuple[TrainConfig, dict]:
    sweep = {k: merged[k] for k in SWEEP_KEYS if k in merged}
    train_keys = {k: v for k, v in merged.items() if k not in SWEEP_KEYS}
    return TrainConfig.from_dict(train_keys), sweep


def write_manifest(out: Path, command: str, config: dict, inputs: dict, outputs: dict) -> Path:
    digests = {}
    for p in inputs.values():
        if p is not None:
            try:
                digests[str(p)] = sha256_file(p)
            except OSError as exc:
                raise UsageError(f"cannot read {p}: {exc.strerror or exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "tool_version": tool_version(),
        "config": config,
        "inputs": digests,
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_data(args, sweep: dict):
    """Graph and corpus from --graph/--corpus, else from the synthetic generator."""
    if (args.graph is None) != (args.corpus is None):
        raise UsageError("--graph and --corpus must be given together")
    if args.graph is not None:
        try:
            graph = load_triples(_read_text(args.graph))
            corpus = read_sentences(_read_text(args.corpus), graph)
        except ParseError as exc:
            raise UsageError(f"{exc}") from None
        return graph, corpus
    return gen_synthetic(SyntheticConfig.from_dict(sweep.get("synthetic", {})))


def cmd_synth(args) -> int:
    merged = resolve(args, load_config_file(args.config))
    cfg = SyntheticConfig.from_dict(merged)
    out = Path(args.out)
    outputs = {"graph": out / "graph.tsv", "corpus": out / "corpus.jsonl"}
    write_manifest(out, "synth", cfg.__dict__.copy(), {"config": args.config}, outputs)
    graph, corpus = gen_synthetic(cfg)
    outputs["graph"].write_text(serialize_triples(graph), encoding="utf-8")
    outputs["corpus"].write_text(write_sentences(corpus), encoding="utf-8")
    print(f"wrote {len(graph.edges)} triples and {len(corpus)} sentences to {out}")
    return EXIT_OK


def _inputs(args) -> dict:
    found = {k: getattr(args, k, None) for k in ("config", "graph", "corpus")}
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        found["checkpoint_manifest"] = Path(ckpt) / "manifest.json"
        found["checkpoint_payload"] = Path(ckpt) / "params.bin"
    return found


def cmd_train(args) -> int:
    merged = resolve(args, load_config_file(args.config))
    config, sweep = split_config(merged)
    out = Path(args.out)
    outputs = {"checkpoint": out / "checkpoint", "history": out / "history.csv", "metrics": out / "metrics.json"}
    write_manifest(out, "train", {**config.to_dict(), **sweep}, _inputs(args), outputs)
    data = harness.Dataset.split(*load_data(args, sweep))
    model, history = train(config, data.graph, data.train)
    outputs["history"].write_text(history.to_csv(), encoding="utf-8")
    if history.diverged:
        print(f"DIVERGED: {history.diverged_reason}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(model, outputs["checkpoint"])
    report = harness.build_report(model, data.graph, data.heldout)
    outputs["metrics"].write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"entity_accuracy={report.entity_accuracy:.4f} f1={report.f1:.4f} bleu={report.bleu:.4f} "
          f"(held-out n={report.n_examples})")
    return EXIT_OK


def cmd_eval(args) -> int:
    merged = resolve(args, load_config_file(args.config))
    out = Path(args.out)
    outputs = {"metrics": out / "metrics.json"}
    sweep = {k: merged.pop(k) for k in SWEEP_KEYS if k in merged}
    try:
        model = load_checkpoint(args.checkpoint)
    except IntegrityError as exc:
        raise UsageError(str(exc)) from None
    eval_config = TrainConfig.from_dict({**model.config.to_dict(), **merged})
    write_manifest(out, "eval", {**eval_config.to_dict(), **sweep, "split": args.split}, _inputs(args), outputs)
    data = harness.Dataset.split(*load_data(args, sweep))
    sentences = data.heldout if args.split == "heldout" else data.train + data.heldout
    report = harness.build_report(model, data.graph, sentences, eval_config)
    outputs["metrics"].write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"entity_accuracy={report.entity_accuracy:.4f} f1={report.f1:.4f} bleu={report.bleu:.4f} "
          f"(n={report.n_examples})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    merged = resolve(args, load_config_file(args.config))
    if args.grid is not None:
        merged[{"sweep-lr": "lr_grid", "sweep-coverage": "coverage_levels",
                "sweep-perturb": "perturb_rates"}[args.command]] = args.grid
    if getattr(args, "modes", None):
        merged["perturb_modes"] = [m.strip().upper() for m in args.modes.split(",") if m.strip()]
    config, sweep = split_config(merged)
    seeds = [int(s) for s in sweep.get("seeds", harness.DEFAULT_SEEDS)]
    out = Path(args.out)
    outputs = {k: out / f"result.{k}" for k in ("csv", "json", "svg")}
    if not args.no_figures:
        outputs["png"] = out / "result.png"
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    resolved = {**config.to_dict(), **sweep, "seeds": seeds}
    if args.command == "sweep-lr":
        resolved["lr_grid"] = [float(x) for x in sweep.get("lr_grid", harness.DEFAULT_LR_GRID)]
    elif args.command == "sweep-coverage":
        resolved["coverage_levels"] = [float(x) for x in sweep.get("coverage_levels", harness.DEFAULT_COVERAGE_LEVELS)]
    else:
        resolved["perturb_rates"] = [float(x) for x in sweep.get("perturb_rates", harness.DEFAULT_PERTURB_RATES)]
        resolved["perturb_modes"] = list(sweep.get("perturb_modes", PERTURBATION_MODES))
    write_manifest(out, args.command, resolved, _inputs(args), outputs)
    data = harness.Dataset.split(*load_data(args, sweep))
    try:
        if args.command == "sweep-lr":
            result = harness.sweep_lr(config, data, resolved["lr_grid"], seeds, jobs=args.jobs)
        elif args.command == "sweep-coverage":
            result = harness.sweep_coverage(config, data, resolved["coverage_levels"], seeds, jobs=args.jobs)
        else:
            model = None
            if getattr(args, "checkpoint", None):
                model = load_checkpoint(args.checkpoint)
            result = harness.sweep_perturbation(config, data, resolved["perturb_modes"], resolved["perturb_rates"],
                                                seeds, model=model)
    except (ValueError, IntegrityError) as exc:
        raise UsageError(str(exc)) from None
    harness.emit_report(result, out, figures=not args.no_figures)
    for var in result.variables():
        means = result.mean_accuracy(var)
        print(var + ": " + ", ".join(f"{v:g}->{a:.4f}" for v, a in means.items()))
    for name, ok in sorted(result.checks.items()):
        print(f"check {name}: {'ok' if ok else 'MISMATCH'}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "sweep-lr": cmd_sweep, "sweep-coverage": cmd_sweep, "sweep-perturb": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"kgfuse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"kgfuse {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
