"""Command-line pipeline: synth, embed, train, score, eval and bench.

Every command writes a ``manifest.json`` into its output directory holding
the argv, seed, input/output digests and timings. Everything else a command
writes is a pure function of its inputs and seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, models, synth
from .dtw import DtwConfig, knn_scores
from .encoder import EmbeddingTable, Encoder, train_item_embeddings
from .events import DataError, load_schema, load_sessions
from .metrics import evaluate

logger = logging.getLogger("seqfraud")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
BENCH_ORDER = ("mlp", "rnn", "cnn_mtf", "fused", "dtw_knn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Collects what a command read and wrote, then emits the manifest."""

    def __init__(self, command: str, argv, out: Path):
        self.command = command
        self.argv = list(argv)
        self.out = out
        self.configs: list[str] = []
        self.inputs: list[Path] = []
        self.seed: Optional[int] = None
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()
        self._started = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def read(self, path) -> Path:
        path = Path(path)
        if path not in self.inputs:
            self.inputs.append(path)
        return path

    def config(self, path) -> Path:
        self.configs.append(str(path))
        return self.read(path)

    def timed(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t, 3)

        return _Timer()

    def finish(self) -> Path:
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        manifest = self.out / "manifest.json"
        outputs = {
            str(p.relative_to(self.out)): sha256_file(p)
            for p in sorted(self.out.rglob("*"))
            if p.is_file() and p != manifest and p.name != "manifest.json"
        }
        record = {
            "command": self.command,
            "argv": self.argv,
            "config_paths": self.configs,
            "seed": self.seed,
            "inputs": {str(p): sha256_file(p) for p in self.inputs},
            "outputs": outputs,
            "version": __version__,
            "started": self._started,
            "timings": self.timings,
        }
        manifest.write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
        return manifest


# -- config helpers -----------------------------------------------------------

def _read_key_values(run: Run, path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    return models.parse_key_values(run.config(path).read_text(encoding="utf-8"), str(path))


def _synth_config(values: dict, seed: Optional[int]):
    try:
        cfg = synth.config_from_dict(values)
    except (TypeError, ValueError) as exc:
        raise models.ConfigError(str(exc)) from exc
    return cfg if seed is None else cfg.replace(seed=seed)


def _model_config(values: dict, source: str, seed: Optional[int]) -> models.ModelConfig:
    cfg = models.config_from_dict(values, source)
    return cfg if seed is None else cfg.replace(seed=seed)


def _load_data(run: Run, data, schema_path):
    if schema_path is None:
        raise UsageError("--schema is required")
    for p in (data, schema_path):
        if not Path(p).is_file():
            raise DataError(f"file not found: {p}")
    schema = load_schema(run.read(schema_path))
    return schema, load_sessions(run.read(data), schema)


def _embed(cfg: models.ModelConfig, sessions) -> Optional[EmbeddingTable]:
    if cfg.embedding_dim == 0:
        return None
    return train_item_embeddings(
        sessions, d_emb=cfg.embedding_dim, window=cfg.embedding_window,
        negatives=cfg.embedding_negatives, epochs=cfg.embedding_epochs, seed=cfg.seed,
    )


def write_epoch_log(log, path) -> None:
    rows = [e.as_row() for e in log]
    keys = list(rows[0]) if rows else ["epoch"]
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(keys) + "\n")
        for r in rows:
            fh.write("\t".join("" if r.get(k) is None else repr(r[k]) for k in keys) + "\n")


def write_scores(sessions, scores, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("session_id\tscore\n")
        for s, p in zip(sessions, scores):
            fh.write(f"{s.session_id}\t{float(p)!r}\n")


def _load_model(run: Run, model_dir):
    model_dir = Path(model_dir)
    if not (model_dir / "model.txt").is_file():
        raise DataError(f"no model found in {model_dir}")
    for name in ("model.txt", "params.bin", "schema.json", "embeddings.bin"):
        if (model_dir / name).is_file():
            run.read(model_dir / name)
    model = models.TrainedModel.load(model_dir)
    emb_path = model_dir / "embeddings.bin"
    emb = EmbeddingTable.load(emb_path) if emb_path.is_file() else None
    return model, emb


def _score(model, encoder, sessions, threads):
    fs = models.featurize(encoder, sessions, model.config.kind, model.config.mtf_smoothing, threads)
    model.check_fingerprint(encoder.fingerprint())
    return model.predict_proba(fs)


# -- commands -----------------------------------------------------------------

def cmd_synth(args, run: Run) -> None:
    cfg = _synth_config(_read_key_values(run, args.config), args.seed)
    run.seed = cfg.seed
    with run.timed("generate"):
        sessions = synth.generate(cfg)
    synth.write_dataset(sessions, synth.schema_for(cfg), run.out)
    logger.info("wrote %d sessions to %s", len(sessions), run.out)


def cmd_embed(args, run: Run) -> None:
    values = _read_key_values(run, args.config) if args.config else {"kind": "rnn"}
    cfg = _model_config(values, str(args.config), args.seed)
    run.seed = cfg.seed
    _, sessions = _load_data(run, args.data, args.schema)
    with run.timed("embed"):
        emb = train_item_embeddings(
            sessions, d_emb=cfg.embedding_dim or 32, window=cfg.embedding_window,
            negatives=cfg.embedding_negatives, epochs=cfg.embedding_epochs, seed=cfg.seed,
        )
    emb.save(run.out / "embeddings.bin")


def cmd_train(args, run: Run) -> None:
    cfg = _model_config(_read_key_values(run, args.config), str(args.config), args.seed)
    run.seed = cfg.seed
    schema, sessions = _load_data(run, args.data, args.schema)
    if args.valid:
        _, valid = _load_data(run, args.valid, args.schema)
        train_set = sessions
    else:
        train_set, valid = models.split_train_valid(sessions, cfg.valid_fraction, cfg.seed)
    with run.timed("embed"):
        if args.embeddings:
            emb = EmbeddingTable.load(run.read(args.embeddings))
        else:
            emb = _embed(cfg, train_set)
    encoder = Encoder.from_schema(schema, emb)
    with run.timed("train"):
        model, log = models.train(cfg, train_set, valid, encoder, args.threads)
    model.save(run.out)
    if emb is not None:
        emb.save(run.out / "embeddings.bin")
    shutil.copyfile(args.schema, run.out / "schema.json")
    write_epoch_log(log, run.out / "epochs.tsv")


def _model_encoder(run, args):
    model, emb = _load_model(run, args.model)
    schema_path = args.schema or Path(args.model) / "schema.json"
    schema, sessions = _load_data(run, args.data, schema_path)
    return model, Encoder.from_schema(schema, emb), sessions


def cmd_score(args, run: Run) -> None:
    model, encoder, sessions = _model_encoder(run, args)
    with run.timed("score"):
        scores = _score(model, encoder, sessions, args.threads)
    write_scores(sessions, scores, run.out / "scores.tsv")


def cmd_eval(args, run: Run) -> None:
    model, encoder, sessions = _model_encoder(run, args)
    if any(s.label is None for s in sessions):
        raise DataError("evaluation needs a label on every session")
    with run.timed("score"):
        scores = _score(model, encoder, sessions, args.threads)
    labels = np.array([s.label for s in sessions])
    write_scores(sessions, scores, run.out / "scores.tsv")
    evaluate(scores, labels).write(run.out)


def _split_bench_config(values: dict[str, str]):
    top, groups = {}, {}
    for key, value in values.items():
        head, dot, rest = key.partition(".")
        if dot:
            groups.setdefault(head, {})[rest] = value
        else:
            top[key] = value
    unknown = set(top) - {"seed", "n_train", "n_test", "models", "threads"}
    unknown |= set(groups) - {"synth", "model", "dtw", *models.KINDS}
    if unknown:
        raise models.ConfigError(f"{sorted(unknown)[0]}: unknown bench config key")
    return top, groups


def _dtw_config(values: dict[str, str]) -> DtwConfig:
    try:
        window = values.get("window", "")
        return DtwConfig(
            k_neighbors=int(values.get("k_neighbors", 5)),
            step_distance=values.get("step_distance", "jaccard_on_active_sets"),
            window=int(window) if window else None,
        )
    except ValueError as exc:
        raise models.ConfigError(f"dtw: {exc}") from exc


def cmd_bench(args, run: Run) -> None:
    top, groups = _split_bench_config(_read_key_values(run, args.config))
    seed = args.seed if args.seed is not None else int(top.get("seed", 0))
    run.seed = seed
    n_train, n_test = int(top.get("n_train", 4000)), int(top.get("n_test", 1000))
    kinds = tuple(k.strip() for k in top.get("models", ",".join(BENCH_ORDER)).split(","))
    bad = [k for k in kinds if k not in BENCH_ORDER]
    if bad:
        raise models.ConfigError(f"models: unknown model {bad[0]!r}")
    kinds = tuple(k for k in BENCH_ORDER if k in kinds)

    scfg = _synth_config({**groups.get("synth", {}), "n_sessions": str(n_train + n_test)}, seed)
    with run.timed("synth"):
        sessions = synth.generate(scfg)
    train_set, test_set = sessions[:n_train], sessions[n_train:]
    schema = synth.schema_for(scfg)
    base = {"kind": "mlp", **groups.get("model", {})}
    emb_cfg = _model_config(base, "model", seed)
    with run.timed("embed"):
        emb = _embed(emb_cfg, train_set)
    encoder = Encoder.from_schema(schema, emb)
    test_labels = np.array([s.label for s in test_set])

    rows = []
    for kind in kinds:
        out = run.out / kind
        out.mkdir(parents=True, exist_ok=True)
        with run.timed(kind):
            if kind == "dtw_knn":
                dcfg = _dtw_config(groups.get("dtw", {}))
                refs = np.stack([e.active for e in encoder.encode(train_set)])
                queries = np.stack([e.active for e in encoder.encode(test_set)])
                labels = np.array([s.label for s in train_set])
                _, scores = knn_scores(queries, refs, labels, dcfg, workers=args.threads)
            else:
                cfg = _model_config({**base, **groups.get(kind, {}), "kind": kind}, kind, seed)
                fit_set, valid = models.split_train_valid(train_set, cfg.valid_fraction, seed)
                model, log = models.train(cfg, fit_set, valid, encoder, args.threads)
                write_epoch_log(log, out / "epochs.tsv")
                (out / "model.txt").write_text(cfg.dumps(), encoding="utf-8")
                scores = _score(model, encoder, test_set, args.threads)
        report = evaluate(scores, test_labels)
        report.write(out)
        write_scores(test_set, scores, out / "scores.tsv")
        rows.append((kind, report))
        logger.info("%-8s auc %.4f ks %.4f", kind, report.auc, report.ks)

    table = "model\tauc\tks\tprecision\tcoverage\n" + "".join(
        f"{k}\t{r.auc:.6f}\t{r.ks:.6f}\t{r.precision:.6f}\t{r.coverage:.6f}\n" for k, r in rows
    )
    (run.out / "bench.tsv").write_text(table, encoding="utf-8")
    print(table, end="")


COMMANDS = {
    "synth": cmd_synth,
    "embed": cmd_embed,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqfraud", description="Session fraud classifiers on categorical event sequences.")
    parser.add_argument("--version", action="version", version=f"seqfraud {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help, config=False, data=False, model=False):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=config, type=Path)
        if data:
            p.add_argument("--data", required=True, type=Path)
            p.add_argument("--schema", type=Path)
        if model:
            p.add_argument("--model", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("synth", "generate a labelled synthetic dataset", config=True)
    add("embed", "train item embeddings", data=True)
    p = add("train", "train one model", config=True, data=True)
    p.add_argument("--valid", type=Path)
    p.add_argument("--embeddings", type=Path)
    add("score", "score sessions with a trained model", data=True, model=True)
    add("eval", "score and evaluate a labelled dataset", data=True, model=True)
    add("bench", "compare all models on a synthetic benchmark", config=True)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, argv, args.out)
        COMMANDS[args.command](args, run)
        run.finish()
    except (UsageError, models.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except models.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, models.FingerprintMismatch, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
