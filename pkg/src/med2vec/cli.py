"""Command-line entry point: synth, train, eval, interpret, and pipeline.

Every run that writes artifacts also writes a JSON run manifest beside them
(<first artifact>.manifest.json, or manifest.json inside an output
directory) holding the resolved flags, seeds, input-file hashes, artifact
paths and wall time, so any output can be reproduced bit-for-bit.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    Corpus,
    GrouperMap,
    SynthConfig,
    Vocabulary,
    generate_synthetic,
    load_corpus,
    load_grouper,
    load_labels,
    save_corpus,
    save_grouper,
    save_labels,
    split_corpus,
    split_corpus_with_labels,
)
from .evaluation import (
    CodeEmbeddings,
    EvalReport,
    ProbeConfig,
    auc_probe_with_weights,
    code_cluster_nmi,
    nearest_codes,
    recall_probe,
    representation_fn,
)
from .interpret import (
    classifier_influence,
    render_report,
    top_codes_for_coordinate,
    top_coords_for_visit_coordinate,
)
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train
from .validation import derive_seed


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


class PipelineStageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclass
class RunManifest:
    """Everything needed to re-execute a run bit-identically."""

    subcommand: str
    flags: dict
    seeds: dict
    input_hashes: dict
    artifacts: list[str] = field(default_factory=list)
    wall_time_s: float = 0.0
    version: str = __version__

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _hash_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _input_hashes(*paths) -> dict:
    return {str(p): _hash_file(p) for p in paths if p is not None}


def _check_threads(threads: int) -> None:
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    if threads > 1:
        warnings.warn("parallel execution is not implemented; running single-threaded")


def _flag_dict(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> RunManifest:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = SynthConfig(
        n_patients=args.n_patients,
        n_codes=args.n_codes,
        n_groups=args.n_groups,
        mean_visits_per_patient=args.mean_visits,
        mean_codes_per_visit=args.mean_codes,
        transition_sharpness=args.sharpness,
        within_group_affinity=args.affinity,
        seed=args.seed,
    )
    corpus, grouper, labels = generate_synthetic(config)
    paths = {
        "visits": out / "visits.txt",
        "demographics": out / "demographics.csv",
        "grouper": out / "grouper.tsv",
        "labels": out / "labels.txt",
    }
    save_corpus(corpus, paths["visits"], paths["demographics"])
    save_grouper(grouper, corpus.vocabulary, paths["grouper"])
    save_labels(labels, corpus, paths["labels"])
    print(
        f"wrote {corpus.n_patients} patients, {corpus.total_visits} visits, "
        f"{len(corpus.vocabulary)} codes, {grouper.n_groups} groups to {out}"
    )
    return RunManifest(
        subcommand="synth",
        flags=_flag_dict(args),
        seeds={"root": args.seed},
        input_hashes={},
        artifacts=[str(p) for p in paths.values()],
    )


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _cmd_train(args) -> RunManifest:
    _check_threads(args.threads)
    if args.out is None:
        raise UsageError("train requires --out for the checkpoint path")
    corpus = load_corpus(args.corpus, args.demo)
    use_grouper = not args.no_grouper
    grouper = None
    if use_grouper:
        if args.grouper is None:
            raise UsageError("train requires --grouper unless --no-grouper is given")
        grouper = load_grouper(args.grouper, corpus.vocabulary)
    config = TrainConfig(
        code_dim=args.m,
        visit_dim=args.n,
        window=args.window,
        epochs=args.epochs,
        batch_size=args.batch_size,
        alpha=args.alpha,
        seed=args.seed,
        use_grouper=use_grouper,
    )
    params, log = train(corpus, grouper, config)
    save_checkpoint(
        args.out, params, corpus.vocabulary.tokens, corpus.vocabulary.content_hash()
    )
    artifacts = [str(args.out)]
    if args.log is not None:
        log.to_csv(args.log)
        artifacts.append(str(args.log))
    last = log.records[-1]
    print(
        f"trained {config.epochs} epoch(s); final losses: total {last.total_loss:.4f}, "
        f"visit {last.visit_loss:.4f}, code {last.code_loss:.4f}"
    )
    return RunManifest(
        subcommand="train",
        flags=_flag_dict(args),
        seeds={
            "root": args.seed,
            "init": derive_seed(args.seed, "init"),
            "shuffle": derive_seed(args.seed, "shuffle"),
        },
        input_hashes=_input_hashes(args.corpus, args.demo, args.grouper, args.labels),
        artifacts=artifacts,
    )


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_checkpoint_vocab(path) -> tuple:
    params, tokens, vocab_hash = load_checkpoint(path)
    return params, Vocabulary(tokens), vocab_hash


def _require_matching_corpus(corpus: Corpus, vocab_hash: str) -> None:
    if corpus.vocabulary.content_hash() != vocab_hash:
        raise ValueError("corpus vocabulary does not match the checkpoint's vocabulary")


def _cmd_eval(args) -> RunManifest:
    _check_threads(args.threads)
    params, vocabulary, vocab_hash = _load_checkpoint_vocab(args.checkpoint)
    probe_seed = derive_seed(args.seed, "probes")
    report = EvalReport()
    config_fp = _flag_dict(args)

    if args.task == "nmi":
        if args.grouper is None:
            raise UsageError("eval --task nmi requires --grouper")
        grouper = load_grouper(args.grouper, vocabulary)
        embeddings = CodeEmbeddings.from_params(params, vocabulary)
        report.add("nmi", code_cluster_nmi(embeddings, grouper, probe_seed), config_fp)
    elif args.task in ("recall", "auc"):
        if args.corpus is None:
            raise UsageError(f"eval --task {args.task} requires --corpus")
        corpus = load_corpus(args.corpus, args.demo)
        _require_matching_corpus(corpus, vocab_hash)
        probe = ProbeConfig(top_k=args.k, seed=probe_seed)
        embed = representation_fn(args.rep, params, vocabulary)
        split_seed = derive_seed(args.seed, "probe-split")
        if args.task == "recall":
            if args.grouper is None:
                raise UsageError("eval --task recall requires --grouper")
            grouper = load_grouper(args.grouper, vocabulary)
            part_train, part_test = split_corpus(corpus, probe.split_ratio, split_seed)
            value = recall_probe(part_train, part_test, embed, grouper, probe)
            report.add(f"recall@{args.k}", value, config_fp)
        else:
            if args.labels is None:
                raise UsageError("eval --task auc requires --labels")
            labels = load_labels(args.labels, corpus)
            tr, tr_labels, te, te_labels = split_corpus_with_labels(
                corpus, labels, probe.split_ratio, split_seed
            )
            value, _ = auc_probe_with_weights(tr, tr_labels, te, te_labels, embed, probe)
            report.add("auc", value, config_fp)
    elif args.task == "neighbors":
        if args.code is None:
            raise UsageError("eval --task neighbors requires --code")
        embeddings = CodeEmbeddings.from_params(params, vocabulary)
        query = vocabulary.index(args.code)
        for rank, (idx, sim) in enumerate(nearest_codes(embeddings, query, args.k), 1):
            report.add(f"neighbor{rank}:{vocabulary.token(idx)}", sim, config_fp)
    else:  # unreachable behind argparse choices
        raise UsageError(f"unknown task {args.task!r}")

    print(report.format_table())
    artifacts = []
    if args.out is not None:
        report.to_csv(args.out)
        artifacts.append(str(args.out))
    return RunManifest(
        subcommand="eval",
        flags=config_fp,
        seeds={"root": args.seed, "probes": probe_seed},
        input_hashes=_input_hashes(
            args.checkpoint, args.corpus, args.demo, args.grouper, args.labels
        ),
        artifacts=artifacts,
    )


# ---------------------------------------------------------------------------
# interpret
# ---------------------------------------------------------------------------


def _cmd_interpret(args) -> RunManifest:
    params, vocabulary, _ = _load_checkpoint_vocab(args.checkpoint)
    if args.mode == "code-coord":
        if args.coord is None:
            raise UsageError("interpret --mode code-coord requires --coord")
        text = render_report(
            top_codes_for_coordinate(params, args.coord, args.k), vocabulary
        )
    elif args.mode == "visit-coord":
        if args.coord is None:
            raise UsageError("interpret --mode visit-coord requires --coord")
        k = min(args.k, params.code_dim)
        text = render_report(
            top_coords_for_visit_coordinate(params, args.coord, k), vocabulary
        )
    else:  # influence
        if args.lr_weights is None:
            raise UsageError("interpret --mode influence requires --lr-weights")
        weights = np.loadtxt(args.lr_weights, dtype=np.float64).reshape(-1)
        text = render_report(
            classifier_influence(params, weights), vocabulary, top=args.k
        )
    artifacts = []
    if args.out is not None:
        Path(args.out).write_text(text)
        artifacts.append(str(args.out))
    else:
        print(text, end="")
    return RunManifest(
        subcommand="interpret",
        flags=_flag_dict(args),
        seeds={},
        input_hashes=_input_hashes(args.checkpoint, args.lr_weights),
        artifacts=artifacts,
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

PIPELINE_DEFAULTS = {
    "seed": 7,
    "n_patients": 300,
    "n_codes": 100,
    "n_groups": 10,
    "mean_visits": 5.0,
    "mean_codes": 4.0,
    "sharpness": 3.0,
    "affinity": 4.0,
    "split_ratio": 0.8,
    "m": 40,
    "n": 40,
    "window": 1,
    "epochs": 10,
    "batch_size": 1000,
    "alpha": 1.0,
    "recall_k": 10,
    "probe_epochs": 10,
    "rep": "med2vec",
    "interpret_k": 10,
}


def _read_pipeline_config(path) -> dict:
    config = dict(PIPELINE_DEFAULTS)
    if path is None:
        return config
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in PIPELINE_DEFAULTS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        default = PIPELINE_DEFAULTS[key]
        config[key] = type(default)(value) if not isinstance(default, str) else value
    return config


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise PipelineStageError(f"stage {name!r} failed: {exc}") from exc


def _cmd_pipeline(args) -> RunManifest:
    _check_threads(args.threads)
    config = _read_pipeline_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    seed = int(config["seed"])
    seeds = {
        "root": seed,
        "corpus": derive_seed(seed, "corpus"),
        "corpus-split": derive_seed(seed, "corpus-split"),
        "probes": derive_seed(seed, "probes"),
        "probe-split": derive_seed(seed, "probe-split"),
    }

    synth_config = SynthConfig(
        n_patients=int(config["n_patients"]),
        n_codes=int(config["n_codes"]),
        n_groups=int(config["n_groups"]),
        mean_visits_per_patient=float(config["mean_visits"]),
        mean_codes_per_visit=float(config["mean_codes"]),
        transition_sharpness=float(config["sharpness"]),
        within_group_affinity=float(config["affinity"]),
        seed=seeds["corpus"],
    )
    corpus, grouper, labels = _stage("synth", generate_synthetic, synth_config)
    _stage("synth", save_corpus, corpus, data_dir / "visits.txt", data_dir / "demographics.csv")
    _stage("synth", save_grouper, grouper, corpus.vocabulary, data_dir / "grouper.tsv")
    _stage("synth", save_labels, labels, corpus, data_dir / "labels.txt")

    train_part, train_labels, held_part, held_labels = _stage(
        "split", split_corpus_with_labels, corpus, labels,
        float(config["split_ratio"]), seeds["corpus-split"],
    )

    train_config = TrainConfig(
        code_dim=int(config["m"]),
        visit_dim=int(config["n"]),
        window=int(config["window"]),
        epochs=int(config["epochs"]),
        batch_size=int(config["batch_size"]),
        alpha=float(config["alpha"]),
        seed=seed,
    )
    params, log = _stage("train", train, train_part, grouper, train_config)
    checkpoint_path = out / "checkpoint.npz"
    save_checkpoint(
        checkpoint_path, params, corpus.vocabulary.tokens, corpus.vocabulary.content_hash()
    )
    log.to_csv(out / "trainlog.csv")

    report = EvalReport()
    probe = ProbeConfig(
        top_k=int(config["recall_k"]),
        epochs=int(config["probe_epochs"]),
        seed=seeds["probes"],
    )
    embed = representation_fn(config["rep"], params, corpus.vocabulary)
    embeddings = CodeEmbeddings.from_params(params, corpus.vocabulary)

    value = _stage("eval-nmi", code_cluster_nmi, embeddings, grouper, seeds["probes"])
    report.add("nmi", value, config)

    probe_train, probe_train_labels, probe_test, probe_test_labels = _stage(
        "eval-split", split_corpus_with_labels, held_part, held_labels,
        probe.split_ratio, seeds["probe-split"],
    )
    value = _stage(
        "eval-recall", recall_probe, probe_train, probe_test, embed, grouper, probe
    )
    report.add(f"recall@{probe.top_k}", value, config)

    auc_value, (lr_weights, _) = _stage(
        "eval-auc", auc_probe_with_weights,
        probe_train, probe_train_labels, probe_test, probe_test_labels, embed, probe,
    )
    report.add("auc", auc_value, config)

    report.to_csv(out / "report.csv")
    print(report.format_table())

    lr_path = out / "lr_weights.txt"
    np.savetxt(lr_path, lr_weights)
    influence = _stage("interpret", classifier_influence, params, lr_weights)
    influence_text = render_report(influence, top=int(config["interpret_k"]))
    strongest = int(np.argmax(influence.values))
    codes_text = render_report(
        top_codes_for_coordinate(params, strongest, int(config["interpret_k"])),
        corpus.vocabulary,
    )
    (out / "influence.txt").write_text(influence_text)
    (out / "top_codes.txt").write_text(codes_text)

    artifacts = [
        str(p)
        for p in (
            data_dir / "visits.txt",
            data_dir / "demographics.csv",
            data_dir / "grouper.tsv",
            data_dir / "labels.txt",
            checkpoint_path,
            out / "trainlog.csv",
            out / "report.csv",
            lr_path,
            out / "influence.txt",
            out / "top_codes.txt",
        )
    ]
    return RunManifest(
        subcommand="pipeline",
        flags={"config": str(args.config) if args.config else None, **config},
        seeds=seeds,
        input_hashes=_input_hashes(args.config),
        artifacts=artifacts,
    )


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="med2vec", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus", parents=[])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-patients", type=int, default=300)
    p.add_argument("--n-codes", type=int, default=100)
    p.add_argument("--n-groups", type=int, default=10)
    p.add_argument("--mean-visits", type=float, default=5.0)
    p.add_argument("--mean-codes", type=float, default=4.0)
    p.add_argument("--sharpness", type=float, default=3.0)
    p.add_argument("--affinity", type=float, default=4.0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train embeddings on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--demo")
    p.add_argument("--grouper")
    p.add_argument("--labels", help="recorded in the manifest; not used by training")
    p.add_argument("--m", type=int, default=40, help="code embedding size")
    p.add_argument("--n", type=int, default=40, help="visit embedding size")
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-grouper", action="store_true", help="predict exact codes")
    p.add_argument("--out", help="checkpoint path (.npz)")
    p.add_argument("--log", help="CSV path for the per-epoch training log")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--demo")
    p.add_argument("--grouper")
    p.add_argument("--labels")
    p.add_argument("--task", required=True, choices=["nmi", "recall", "auc", "neighbors"])
    p.add_argument("--k", type=int, default=30, help="top-k for recall / neighbors")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rep", choices=["med2vec", "multihot", "sumcode"], default="med2vec")
    p.add_argument("--code", help="query token for --task neighbors")
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("interpret", help="inspect a checkpoint's coordinates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=["code-coord", "visit-coord", "influence"])
    p.add_argument("--coord", type=int)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--lr-weights", help="text file with one classifier weight per line")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_interpret)

    p = sub.add_parser("pipeline", help="run synth -> split -> train -> eval -> interpret")
    p.add_argument("--config", help="key=value file overriding the documented defaults")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default="pipeline_out")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_pipeline)

    return parser


def _manifest_path(manifest: RunManifest) -> Path | None:
    if not manifest.artifacts:
        return None
    first = Path(manifest.artifacts[0])
    if manifest.subcommand in ("synth", "pipeline"):
        base = first.parent if manifest.subcommand == "synth" else first.parent.parent
        return base / "manifest.json"
    return first.with_name(first.name + ".manifest.json")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    started = time.perf_counter()
    try:
        manifest = args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    manifest.wall_time_s = time.perf_counter() - started
    path = _manifest_path(manifest)
    if path is not None:
        manifest.write(path)
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
