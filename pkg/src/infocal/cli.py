"""Command-line interface: ``infocal {synth,pretrain-lm,train,eval,extract,report}``.

Configuration comes from an optional flat ``key = value`` file and from
command-line flags named after the same keys in kebab-case. Command-line
values beat the file, the file beats built-in defaults, and the
``ICAL_SEED`` environment variable replaces the seed unless ``--seed`` is
given. Every command writes its outputs under
``<output-dir>/<timestamp>-<config hash>/`` together with a manifest that
can be passed back as ``--config`` to repeat the run.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps runs bit-reproducible; must precede the numpy import
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import csv  # noqa: E402
import html  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import dataclass, fields  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from . import metrics  # noqa: E402
from . import training as tr  # noqa: E402
from .corpus import (  # noqa: E402
    Corpus,
    CorpusError,
    DESK_TASK,
    SynthSpec,
    Vocab,
    build_vocab,
    corpus_hash,
    fnv1a_64,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
    split_corpus,
)
from .diffcore import checkpoint  # noqa: E402
from .lmreg import perplexity  # noqa: E402
from .model import CLASSIFICATION, REGRESSION, InfoCalModel, ModelConfig  # noqa: E402

log = logging.getLogger("infocal")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2, 3
RECORD_PREFIX = "record."
MANIFEST = "manifest.txt"

PRESETS = {
    "none": {},
    "beer": tr.BEER_HYPERPARAMS,
    "legal": tr.LEGAL_HYPERPARAMS,
    "synthetic": tr.SYNTH_HYPERPARAMS,
}


class CliError(Exception):
    pass


@dataclass
class RunOptions:
    """Everything but the hyperparameters."""

    corpus: str | None = None
    dev_corpus: str | None = None
    test_corpus: str | None = None
    lm_checkpoint: str | None = None
    checkpoint: str | None = None
    vocab: str | None = None
    extraction: str | None = None
    output_dir: str = "runs"
    run_name: str | None = None
    preset: str = "none"
    min_freq: int = 1
    disable_adv: bool = False
    disable_lm: bool = False
    disable_ib: bool = False
    synth_vocab_size: int = DESK_TASK["vocab_size"]
    synth_min_len: int = DESK_TASK["min_len"]
    synth_max_len: int = DESK_TASK["max_len"]
    synth_instances: int = 6500
    synth_trigger_len: int = DESK_TASK["trigger_len"]
    synth_patterns_per_class: int = DESK_TASK["patterns_per_class"]
    synth_connector: bool = False
    synth_noise_rate: float = 0.0
    synth_evidence_reliability: float = 1.0
    split_train: int = 5000
    split_dev: int = 500


HP_FIELDS = {f.name: f for f in fields(tr.Hyperparams)}
OPT_FIELDS = {f.name: f for f in fields(RunOptions)}
ALL_FIELDS = {**HP_FIELDS, **OPT_FIELDS}
DEFAULTS = {**tr.hyperparam_items(tr.Hyperparams()), **{k: getattr(RunOptions(), k) for k in OPT_FIELDS}}


@dataclass
class RunConfig:
    hp: tr.Hyperparams
    opts: RunOptions

    @property
    def flags(self) -> tr.AblationFlags:
        return tr.AblationFlags(self.opts.disable_adv, self.opts.disable_lm, self.opts.disable_ib)

    def items(self) -> dict:
        out = tr.hyperparam_items(self.hp)
        out.update({k: getattr(self.opts, k) for k in OPT_FIELDS})
        return dict(sorted(out.items()))

    def digest(self) -> str:
        text = "".join(f"{k} = {format_value(v)}\n" for k, v in self.items().items() if k != "run_name")
        return f"{fnv1a_64(text.encode('utf-8')):016x}"


# -- key = value files -------------------------------------------------------------


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(key: str, text: str):
    """Convert a string to the type of config field ``key``."""
    default = DEFAULTS[key]
    annotation = str(ALL_FIELDS[key].type)
    if text.strip().lower() in ("none", "") and ("None" in annotation or default is None):
        return None
    if isinstance(default, bool) or annotation == "bool":
        return _parse_bool(text)
    if isinstance(default, int) or annotation.startswith("int"):
        return int(text)
    if isinstance(default, float) or annotation.startswith("float"):
        return float(text)
    return text.strip()


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment line."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_kv(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {format_value(v)}\n" for k, v in items.items()), encoding="utf-8")


def resolve_config(file_values: dict[str, str], cli_values: dict, env: dict | None = None) -> RunConfig:
    """Merge defaults, a preset, the config file, ``ICAL_SEED`` and command-line values."""
    env = os.environ if env is None else env
    unknown = sorted(k for k in file_values if k not in ALL_FIELDS and not k.startswith(RECORD_PREFIX))
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    parsed = {}
    for k, v in file_values.items():
        if k.startswith(RECORD_PREFIX):
            continue
        try:
            parsed[k] = coerce(k, v)
        except ValueError as exc:
            raise CliError(f"config key {k}: {exc}") from None
    preset = cli_values.get("preset") or parsed.get("preset") or "none"
    if preset not in PRESETS:
        raise CliError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    merged = {**DEFAULTS, **PRESETS[preset], **parsed}
    if "ICAL_SEED" in env and env["ICAL_SEED"] != "":
        try:
            merged["seed"] = int(env["ICAL_SEED"])
        except ValueError:
            raise CliError(f"ICAL_SEED must be an integer, got {env['ICAL_SEED']!r}") from None
    merged.update(cli_values)
    merged["preset"] = preset
    try:
        hp = tr.Hyperparams(**{k: merged[k] for k in HP_FIELDS})
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid hyperparameters: {exc}") from None
    return RunConfig(hp, RunOptions(**{k: merged[k] for k in OPT_FIELDS}))


# -- run directories ------------------------------------------------------------------


def make_run_dir(cfg: RunConfig, command: str) -> Path:
    base = Path(cfg.opts.output_dir)
    name = cfg.opts.run_name or f"{time.strftime('%Y%m%d-%H%M%S')}-{command}-{cfg.digest()[:8]}"
    path = base / name
    suffix = 1
    while path.exists() and cfg.opts.run_name is None:
        suffix += 1
        path = base / f"{name}-{suffix}"
    if path.exists() and any(path.iterdir()):
        raise CliError(f"run directory {path} already exists and is not empty")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create run directory {path}: {exc.strerror or exc}") from None
    return path


def write_manifest(run_dir: Path, cfg: RunConfig, command: str, records: dict) -> None:
    items = cfg.items()
    items["run_name"] = None  # a rerun from this manifest gets a fresh directory
    items.update({f"{RECORD_PREFIX}{k}": v for k, v in records.items()})
    items[f"{RECORD_PREFIX}command"] = command
    items[f"{RECORD_PREFIX}version"] = __version__
    items[f"{RECORD_PREFIX}config_hash"] = cfg.digest()
    write_kv(run_dir / MANIFEST, items)


# -- checkpoints with metadata --------------------------------------------------------

MODEL_KIND, LM_KIND = 1.0, 2.0


def _hash_words(hex_digest: str) -> np.ndarray:
    """A 64-bit hash as four 16-bit words; exactly representable in float32."""
    value = int(hex_digest, 16)
    return np.array([(value >> s) & 0xFFFF for s in (48, 32, 16, 0)], dtype=np.float32)


def _words_hash(words: np.ndarray) -> str:
    value = 0
    for w in words.astype(np.int64):
        value = (value << 16) | int(w)
    return f"{value:016x}"


def save_model(path: Path, model: InfoCalModel, state: dict, vocab: Vocab) -> None:
    cfg = model.cfg
    meta = np.array(
        [MODEL_KIND, cfg.vocab_size, cfg.n_classes, cfg.emb_dim, cfg.hidden, cfg.feature_dim, cfg.task_mode == REGRESSION],
        dtype=np.float32,
    )
    checkpoint.save(path, {"meta.config": meta, "meta.vocab_hash": _hash_words(vocab.hash()), **state})


def load_model(path: str | os.PathLike, vocab: Vocab) -> InfoCalModel:
    tensors = _load_checkpoint(path, MODEL_KIND, vocab)
    kind, vocab_size, n_classes, emb, hidden, feat, regression = tensors.pop("meta.config").astype(int).tolist()
    task = REGRESSION if regression else CLASSIFICATION
    model = InfoCalModel(ModelConfig(vocab_size, n_classes, task, emb, hidden, feat))
    model.load_arrays(tensors)
    return model


def save_lm(path: Path, lm, vocab: Vocab) -> None:
    cfg = lm.cfg
    meta = np.array([LM_KIND, cfg.vocab_size, cfg.emb_dim, cfg.hidden, cfg.out_dim], dtype=np.float32)
    state = {k: p.data for k, p in lm.named_params().items()}
    checkpoint.save(path, {"meta.config": meta, "meta.vocab_hash": _hash_words(vocab.hash()), **state})


def load_lm(path: str | os.PathLike, vocab: Vocab):
    from .lmreg import ContinuousLm, LmConfig

    tensors = _load_checkpoint(path, LM_KIND, vocab)
    kind, vocab_size, emb, hidden, out_dim = tensors.pop("meta.config").astype(int).tolist()
    lm = ContinuousLm(LmConfig(vocab_size, emb, hidden, out_dim))
    lm.load_arrays(tensors)
    lm.pretrained = True
    return lm


def _load_checkpoint(path, kind: float, vocab: Vocab) -> dict:
    try:
        tensors = checkpoint.load(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except checkpoint.CheckpointError as exc:
        raise CliError(f"{path}: {exc}") from None
    meta = tensors.get("meta.config")
    if meta is None or meta[0] != kind:
        raise CliError(f"{path}: not a {'model' if kind == MODEL_KIND else 'language model'} checkpoint")
    stored = _words_hash(tensors.pop("meta.vocab_hash"))
    if stored != vocab.hash():
        raise CliError(f"{path}: vocabulary hash {stored} does not match {vocab.hash()}; checkpoint and corpus vocabulary differ")
    return tensors


# -- helpers ----------------------------------------------------------------------


def _load_corpus(path: str | None, what: str, regression: bool) -> Corpus:
    if not path:
        raise CliError(f"{what} corpus path required")
    if not Path(path).is_file():
        raise CliError(f"{what} corpus not found: {path}")
    try:
        return load_jsonl(path, regression=regression)
    except CorpusError as exc:
        raise CliError(str(exc)) from None


def _vocab_for(cfg: RunConfig, train: Corpus | None = None) -> Vocab:
    if cfg.opts.vocab:
        try:
            return Vocab.load(cfg.opts.vocab)
        except FileNotFoundError:
            raise CliError(f"vocabulary not found: {cfg.opts.vocab}") from None
    if train is not None:
        return build_vocab(train, cfg.opts.min_freq)
    if cfg.opts.checkpoint:
        sibling = Path(cfg.opts.checkpoint).with_name("vocab.json")
        if sibling.is_file():
            return Vocab.load(sibling)
    raise CliError("vocabulary required: pass --vocab or keep vocab.json next to the checkpoint")


def _n_classes(corpus: Corpus, hp: tr.Hyperparams) -> int:
    if hp.task_mode == REGRESSION:
        return 1
    return max(2, 1 + max(int(inst.label) for inst in corpus))


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: format_value(v) for k, v in row.items()})


def _write_report(run_dir: Path, stem: str, report: metrics.MetricsReport) -> None:
    (run_dir / f"{stem}.txt").write_text(report.to_text(), encoding="utf-8")
    (run_dir / f"{stem}.csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n", encoding="utf-8")


def write_extraction(path: Path, ex: tr.Extraction) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for uid, mask, probs, pred in zip(ex.uids, ex.masks, ex.probs, ex.predictions):
            row = {"id": uid, "mask": mask.astype(int).tolist(), "p": [float(x) for x in probs], "prediction": [float(x) for x in pred]}
            fh.write(json.dumps(row) + "\n")


def read_extraction(path: str) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError:
        raise CliError(f"extraction dump not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc.msg})") from None


# -- commands ---------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    o = cfg.opts
    spec = SynthSpec(
        vocab_size=o.synth_vocab_size, min_len=o.synth_min_len, max_len=o.synth_max_len, n_instances=o.synth_instances,
        trigger_len=o.synth_trigger_len, patterns_per_class=o.synth_patterns_per_class, connector=o.synth_connector,
        noise_rate=o.synth_noise_rate, evidence_reliability=o.synth_evidence_reliability, seed=cfg.hp.seed,
    )
    corpus = generate_synthetic(spec)
    n_train, n_dev = o.split_train, o.split_dev
    if n_train + n_dev >= len(corpus):
        raise CliError(f"split {n_train}+{n_dev} leaves no test instances out of {len(corpus)}")
    run_dir = make_run_dir(cfg, "synth")
    parts = {"train": corpus.instances[:n_train], "dev": corpus.instances[n_train:n_train + n_dev], "test": corpus.instances[n_train + n_dev:]}
    for name, insts in parts.items():
        save_jsonl(insts, run_dir / f"{name}.jsonl")
    write_manifest(run_dir, cfg, "synth", {f"n_{k}": len(v) for k, v in parts.items()})
    print(run_dir)
    return EXIT_OK


def cmd_pretrain_lm(cfg: RunConfig) -> int:
    regression = cfg.hp.task_mode == REGRESSION
    train = _load_corpus(cfg.opts.corpus, "training", regression)
    dev = _load_corpus(cfg.opts.dev_corpus, "dev", regression) if cfg.opts.dev_corpus else None
    # vocabulary from the whole corpus so the LM pairs with a train run on the same file
    vocab = _vocab_for(cfg, train)
    if dev is None:
        train, dev, _ = split_corpus(train, cfg.hp.seed)
        log.warning("no dev corpus given; using a seeded 8:1:1 split of the training corpus")
    run_dir = make_run_dir(cfg, "pretrain-lm")
    d_train = tr.encode_corpus(train, vocab, cfg.hp.task_mode)
    d_dev = tr.encode_corpus(dev, vocab, cfg.hp.task_mode)
    lm = tr.build_lm(len(vocab), cfg.hp)
    baseline = perplexity(lm, d_dev.seqs[:500])
    rows = tr.pretrain_lm(lm, d_train, vocab, cfg.hp, d_dev)
    for row in rows:
        log.info("lm epoch %d: loss %.4f quasi-perplexity %.4f", row["epoch"], row["loss"], row["quasi_perplexity"])
    vocab.save(run_dir / "vocab.json")
    save_lm(run_dir / "lm.ical", lm, vocab)
    _write_csv(run_dir / "lm_epochs.csv", rows)
    write_manifest(run_dir, cfg, "pretrain-lm", {
        "corpus_hash": corpus_hash(train), "dev_hash": corpus_hash(dev), "vocab_hash": vocab.hash(),
        "untrained_quasi_perplexity": baseline, "final_quasi_perplexity": rows[-1]["quasi_perplexity"] if rows else baseline,
    })
    print(run_dir)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    hp = cfg.hp
    eff = cfg.flags.effective(hp)
    if eff.lambda_lm > 0 and not cfg.opts.lm_checkpoint:
        raise CliError("lambda_lm > 0 requires --lm-checkpoint (run pretrain-lm first, or pass --disable-lm)")
    regression = hp.task_mode == REGRESSION
    train = _load_corpus(cfg.opts.corpus, "training", regression)
    dev = _load_corpus(cfg.opts.dev_corpus, "dev", regression) if cfg.opts.dev_corpus else None
    test = _load_corpus(cfg.opts.test_corpus, "test", regression) if cfg.opts.test_corpus else None
    vocab = _vocab_for(cfg, train)
    lm = load_lm(cfg.opts.lm_checkpoint, vocab) if eff.lambda_lm > 0 else None
    run_dir = make_run_dir(cfg, "train")
    start = time.perf_counter()

    d_train = tr.encode_corpus(train, vocab, hp.task_mode)
    d_dev = tr.encode_corpus(dev, vocab, hp.task_mode) if dev is not None else None
    model = tr.build_model(len(vocab), _n_classes(train, hp), hp)
    init_disc = {k: v.copy() for k, v in model.state_arrays().items() if k.startswith("discriminator.")}
    trainer = tr.Trainer(model, hp, cfg.flags, lm)
    result = tr.fit(trainer, d_train, d_dev, on_epoch=lambda lg: log.info("epoch %d %s", lg.epoch, lg.row()))

    vocab.save(run_dir / "vocab.json")
    save_model(run_dir / "final.ical", model, result.final_state, vocab)
    save_model(run_dir / "best.ical", model, result.best_state, vocab)
    _write_csv(run_dir / "epochs.csv", [lg.row() for lg in result.logs])

    model.load_arrays(result.best_state)
    records = {
        "corpus_hash": corpus_hash(train), "vocab_hash": vocab.hash(), "best_epoch": result.best_epoch,
        "skipped_batches": sum(lg.n_skipped for lg in result.logs),
        "discriminator_at_init": all(np.array_equal(init_disc[k], result.final_state[k]) for k in init_disc),
    }
    for name, part in (("dev", dev), ("test", test)):
        if part is None:
            continue
        report, _ = tr.evaluate(model, tr.encode_corpus(part, vocab, hp.task_mode))
        _write_report(run_dir, f"metrics_{name}", report)
        records[f"{name}_hash"] = corpus_hash(part)
        records.update({f"{name}.{k}": v for k, v in report.as_dict().items()})
    records["seconds"] = round(time.perf_counter() - start, 2)
    write_manifest(run_dir, cfg, "train", records)
    print(run_dir)
    return EXIT_OK


def _eval_setup(cfg: RunConfig):
    if not cfg.opts.checkpoint:
        raise CliError("--checkpoint required")
    vocab = _vocab_for(cfg)
    model = load_model(cfg.opts.checkpoint, vocab)
    corpus = _load_corpus(cfg.opts.corpus, "evaluation", model.cfg.task_mode == REGRESSION)
    return vocab, model, corpus


def cmd_eval(cfg: RunConfig) -> int:
    vocab, model, corpus = _eval_setup(cfg)
    data = tr.encode_corpus(corpus, vocab, model.cfg.task_mode)
    report, ex = tr.evaluate(model, data, sampled=cfg.hp.sampled_inference)
    run_dir = make_run_dir(cfg, "eval")
    _write_report(run_dir, "report", report)
    write_extraction(run_dir / "extraction.jsonl", ex)
    write_manifest(run_dir, cfg, "eval", {"corpus_hash": corpus_hash(corpus), "vocab_hash": vocab.hash(), **report.as_dict()})
    sys.stdout.write(report.to_text())
    print(run_dir)
    return EXIT_OK


def cmd_extract(cfg: RunConfig) -> int:
    vocab, model, corpus = _eval_setup(cfg)
    data = tr.encode_corpus(corpus, vocab, model.cfg.task_mode)
    ex = tr.extract_corpus(model, data, sampled=cfg.hp.sampled_inference, seed=cfg.hp.seed)
    run_dir = make_run_dir(cfg, "extract")
    write_extraction(run_dir / "extraction.jsonl", ex)
    write_manifest(run_dir, cfg, "extract", {"corpus_hash": corpus_hash(corpus), "vocab_hash": vocab.hash(), "n_instances": len(data)})
    print(run_dir)
    return EXIT_OK


ANSI_ON, ANSI_OFF = "\x1b[1;4;33m", "\x1b[0m"


def render_ansi(tokens, mask) -> str:
    return " ".join(f"{ANSI_ON}{t}{ANSI_OFF}" if m else t for t, m in zip(tokens, mask))


def render_html(blocks: list[dict]) -> str:
    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset=\"utf-8\"><title>Extracted rationales</title>",
        "<style>mark{background:#ffe08a} .inst{margin:1em 0;font-family:sans-serif} .meta{color:#555}</style>",
        "</head><body>",
    ]
    for b in blocks:
        words = " ".join(f"<mark>{html.escape(t)}</mark>" if m else html.escape(t) for t, m in zip(b["tokens"], b["mask"]))
        parts.append(
            f"<div class=\"inst\"><p class=\"meta\">{html.escape(str(b['id']))} | prediction {html.escape(str(b['prediction']))}"
            f" | gold {html.escape(str(b['label']))}</p><p>{words}</p></div>"
        )
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def cmd_report(cfg: RunConfig) -> int:
    if not cfg.opts.extraction:
        raise CliError("--extraction required")
    rows = read_extraction(cfg.opts.extraction)
    corpus = _load_corpus(cfg.opts.corpus, "report", cfg.hp.task_mode == REGRESSION)
    by_id = {(inst.uid if inst.uid is not None else str(i)): inst for i, inst in enumerate(corpus)}
    blocks, missing = [], []
    for row in rows:
        inst = by_id.get(str(row["id"]))
        if inst is None or len(row["mask"]) != len(inst.tokens):
            missing.append(str(row["id"]))
            continue
        pred = row["prediction"]
        shown = int(np.argmax(pred)) if cfg.hp.task_mode == CLASSIFICATION else round(float(pred[-1]), 4)
        blocks.append({"id": row["id"], "tokens": inst.tokens, "mask": row["mask"], "prediction": shown, "label": inst.label})
    dumped = {str(r["id"]) for r in rows}
    missing += [uid for uid in by_id if uid not in dumped]
    run_dir = make_run_dir(cfg, "report")
    ansi = "".join(f"[{b['id']}] prediction={b['prediction']} gold={b['label']}\n{render_ansi(b['tokens'], b['mask'])}\n\n" for b in blocks)
    (run_dir / "report.ansi").write_text(ansi, encoding="utf-8")
    (run_dir / "report.html").write_text(render_html(blocks), encoding="utf-8")
    (run_dir / "mismatched_ids.txt").write_text("".join(m + "\n" for m in missing), encoding="utf-8")
    write_manifest(run_dir, cfg, "report", {"rendered": len(blocks), "mismatched": len(missing)})
    if sys.stdout.isatty():
        sys.stdout.write(ansi)
    print(run_dir)
    if missing:
        print(f"infocal report: {len(missing)} instance ids did not align: {', '.join(missing)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-lm": cmd_pretrain_lm,
    "train": cmd_train,
    "eval": cmd_eval,
    "extract": cmd_extract,
    "report": cmd_report,
}


# -- argument parsing -----------------------------------------------------------------


def _add_field_flags(parser: argparse.ArgumentParser) -> None:
    for name in sorted(ALL_FIELDS):
        flag = "--" + name.replace("_", "-")
        default = DEFAULTS[name]
        if isinstance(default, bool):
            parser.add_argument(flag, dest=name, nargs="?", const="true", default=argparse.SUPPRESS, metavar="BOOL")
        else:
            parser.add_argument(flag, dest=name, default=argparse.SUPPRESS, metavar=type(default).__name__.upper() if default is not None else "VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infocal", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file (a manifest from an earlier run works)")
        p.add_argument("-v", "--verbose", action="store_true")
        _add_field_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:  # usage errors, --help and --version
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    command = args.pop("command")
    config_path = args.pop("config")
    verbose = args.pop("verbose")
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cli_values = {}
        for k, v in args.items():
            try:
                cli_values[k] = coerce(k, v)
            except ValueError as exc:
                print(f"infocal {command}: error: --{k.replace('_', '-')}: {exc}", file=sys.stderr)
                return EXIT_USAGE
        cfg = resolve_config(read_kv(config_path) if config_path else {}, cli_values)
        return COMMANDS[command](cfg)
    except CliError as exc:
        print(f"infocal {command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
