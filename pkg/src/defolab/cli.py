"""
Command-line entry point.

::

    defo gen-data   --config exp.ini --out runs/a
    defo pretrain   --config exp.ini --out runs/a
    defo train      --config exp.ini --out runs/a --protocol defo --shots 1
    defo eval       --config exp.ini --out runs/a --protocol defo --shots 1
    defo interpret  --config exp.ini --out runs/a --protocol defo --shots 1
    defo compare    --config exp.ini --out runs/a
    defo gradcheck  --config exp.ini --out runs/a
    defo export-curves --out runs/a

Every artifact lands under ``--out``. Exit codes: 0 ok, 2 config error,
3 data error, 4 numeric failure, 5 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple


from . import numcore as nc
from . import records
from .datastore import (COLOR_RGB, SHAPES, TEXTURES, DataError, Dataset, ToyGrammar,
                        caption_corpus, config_digest, generate_toy_dataset, load_checkpoint, load_dataset,
                        save_checkpoint, save_dataset)
from .encoders import EncoderConfig, EncoderPack, default_vocabulary, init_pack, load_pack, save_pack
from .evalkit import EvalReport, dump_top5, evaluate, interpret_queries
from .gradsuite import run_suite
from .protocols import (TRAINABLE_VARIANTS, VARIANTS, ProtocolConfig, ProtocolError, ProtocolState,
                        build_protocol, image_features)
from .trainer import (PretrainConfig, TrainConfig, TrainingError, TrainingReport, contrastive_pretrain,
                      rng_stream, sample_few_shot, train_protocol)

log = logging.getLogger("defolab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5

DEFAULT_TEMPLATES = ("a photo of a {}", "a picture of a {}", "an image of a {}")
COMPARE_ORDER = ("zero-shot", "ensemble", "linear-probe", "coop", "target-opt", "defo")
METRIC_COLUMNS = ("top1", "top5", "classwise_std")


class ConfigError(ValueError):
    """Every violation found in an experiment configuration."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DataSpec:
    shapes: Tuple[str, ...] = ToyGrammar.shapes
    colors: Tuple[str, ...] = ToyGrammar.colors
    textures: Tuple[str, ...] = ToyGrammar.textures
    n_train: int = 1440
    n_test: int = 600

    @property
    def grammar(self) -> ToyGrammar:
        return ToyGrammar(self.shapes, self.colors, self.textures)


@dataclass
class PretrainSpec:
    shapes: Tuple[str, ...] = SHAPES
    colors: Tuple[str, ...] = tuple(COLOR_RGB)
    textures: Tuple[str, ...] = TEXTURES
    n_images: int = 2048
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 2e-3
    lr_schedule: str = "cosine"

    @property
    def grammar(self) -> ToyGrammar:
        return ToyGrammar(self.shapes, self.colors, self.textures)


@dataclass
class ProtocolSpec:
    """Protocol settings minus the class names, which come from the data grammar."""

    variant: str = "defo"
    tau: float = 0.07
    templates: Tuple[str, ...] = DEFAULT_TEMPLATES
    coop_prefix_len: int = 4
    coop_init: str = "template"
    coop_shared: bool = True
    target_name_len: int = 2
    target_init: str = "class-name"
    n_queries: int = 32
    defo_init: str = "random"
    defo_prefix_len: int = 4
    identity_block: bool = False
    freeze_queries: bool = False
    head_bias: bool = False
    logit_scale: Optional[float] = None
    probe_bias: bool = True

    def build(self, class_names: Sequence[str], **overrides) -> ProtocolConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(overrides)
        return ProtocolConfig(class_names=list(class_names), **kw)


@dataclass
class ExperimentConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataSpec = field(default_factory=DataSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def canonical_text(self) -> str:
        """Sorted ``key = value`` rendering; its digest identifies the run."""
        out = [f"[experiment]\nseed = {self.seed}"]
        for name in ("encoder", "data", "pretrain", "protocol", "train"):
            section = getattr(self, name)
            out.append(f"[{name}]")
            for f in sorted(fields(section), key=lambda f: f.name):
                if name == "train" and f.name == "seed":
                    continue
                out.append(f"{f.name} = {_render(getattr(section, f.name))}")
        return "\n".join(out) + "\n"

    @property
    def digest(self) -> str:
        return config_digest(self.canonical_text())

    def pretrain_config(self) -> PretrainConfig:
        return _pretrain_config(self.pretrain, self.protocol.tau, derive_seed(self.seed, "pretrain"))


def _render(value) -> str:
    if isinstance(value, tuple):
        return " | ".join(value) if any("{}" in v for v in value) else ", ".join(value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def derive_seed(seed: int, name: str) -> int:
    """Integer seed for one named stream of the experiment seed."""
    return int(rng_stream(seed, name).integers(0, 2**31 - 1))


_SECTIONS = {"encoder": EncoderConfig, "data": DataSpec, "pretrain": PretrainSpec,
             "protocol": ProtocolSpec, "train": TrainConfig}


def _convert(raw: str, annotation: str):
    text = raw.strip()
    if "Tuple" in annotation:
        sep = "|" if "|" in text else ","
        return tuple(part.strip() for part in text.split(sep) if part.strip())
    if "bool" in annotation:
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if "Optional" in annotation and text.lower() in ("none", ""):
        return None
    if "int" in annotation:
        return int(text)
    if "float" in annotation:
        return float(text)
    return text


def parse_config(text: str, seed: Optional[int] = None) -> ExperimentConfig:
    """
    Parse a ``key = value`` document with section headers. All problems
    (unknown keys, bad values, invariant violations) are gathered into one
    ``ConfigError``.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    errors: List[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unreadable config: {exc}".splitlines()[0]]) from None
    values: Dict[str, dict] = {name: {} for name in _SECTIONS}
    exp_seed = 0
    for section in parser.sections():
        if section == "experiment":
            for key, raw in parser.items(section):
                if key == "seed":
                    try:
                        exp_seed = int(raw)
                    except ValueError:
                        errors.append(f"[experiment] seed: expected an integer, got {raw!r}")
                else:
                    errors.append(f"[experiment] unknown key {key!r}")
            continue
        cls = _SECTIONS.get(section)
        if cls is None:
            errors.append(f"unknown section [{section}]")
            continue
        known = {f.name: f for f in fields(cls)}
        for key, raw in parser.items(section):
            f = known.get(key)
            if f is None or (section == "train" and key == "seed"):
                errors.append(f"[{section}] unknown key {key!r}")
                continue
            try:
                values[section][key] = _convert(raw, str(f.type))
            except ValueError as exc:
                errors.append(f"[{section}] {key}: {exc}")
    if seed is not None:
        exp_seed = seed
    built = {}
    for name, cls in _SECTIONS.items():
        kw = values[name]
        if name == "train":
            kw = dict(kw, seed=exp_seed)
        try:
            built[name] = cls(**kw)
        except (ValueError, TypeError) as exc:
            errors += [f"[{name}] {msg}" for msg in str(exc).split("; ")]
    errors += _cross_checks(built)
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(seed=exp_seed, **built)


def _cross_checks(built: dict) -> List[str]:
    """Checks spanning sections; sections that failed to build are skipped."""
    errors = []
    for name in ("data", "pretrain"):
        if name in built:
            errors += [f"[{name}] {e}" for e in built[name].grammar.validate()]
    data: Optional[DataSpec] = built.get("data")
    grammar_ok = data is not None and not data.grammar.validate()
    if grammar_ok and (data.n_train < len(data.grammar.classes) or data.n_test < len(data.grammar.classes)):
        errors.append("[data] n_train and n_test need at least one image per class")
    proto: Optional[ProtocolSpec] = built.get("protocol")
    if "pretrain" in built:
        if built["pretrain"].n_images < 2:
            errors.append("[pretrain] n_images must be >= 2")
        tau = proto.tau if proto is not None and proto.tau > 0 else 0.07
        errors += [f"[pretrain] {e}" for e in _pretrain_config(built["pretrain"], tau, 0).validate()]
    if proto is not None:
        class_names = data.grammar.class_names if grammar_ok else ["red circle", "blue circle"]
        try:
            proto.build(class_names)
        except ProtocolError as exc:
            errors += [f"[protocol] {msg}" for msg in str(exc).split("; ")]
        if len(proto.templates) < 2:
            errors.append("[protocol] templates: prompt ensembling needs at least 2 templates")
    if "encoder" in built:
        words = len(default_vocabulary())
        if built["encoder"].vocab_size != words:
            errors.append(f"[encoder] vocab_size must equal the {words} words of the shipped vocabulary")
    return errors


def _pretrain_config(p: PretrainSpec, tau: float, seed: int) -> PretrainConfig:
    return PretrainConfig(epochs=p.epochs, batch_size=p.batch_size, learning_rate=p.learning_rate,
                          tau=tau, seed=seed, lr_schedule=p.lr_schedule)


def load_config(path: Optional[str], seed: Optional[int] = None) -> ExperimentConfig:
    if path is None:
        return parse_config("", seed)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, seed)


# ---------------------------------------------------------------------------
# workspace layout
# ---------------------------------------------------------------------------

@dataclass
class Workspace:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    def split(self, name: str) -> Path:
        return self.data / name

    @property
    def pack(self) -> Path:
        return self.root / "pack.dfo"

    def run_tag(self, protocol: str, shots: Optional[int]) -> str:
        return protocol if shots is None else f"{protocol}-{shots}shot"

    def run_dir(self, tag: str) -> Path:
        return self.root / "train" / tag

    def ensure(self, path: Path) -> Path:
        path.mkdir(parents=True, exist_ok=True)
        return path


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _fmt(x: float) -> str:
    return f"{x:.6g}"


# ---------------------------------------------------------------------------
# library-level steps (shared by the commands and the tests)
# ---------------------------------------------------------------------------

def make_datasets(cfg: ExperimentConfig) -> Dict[str, Dataset]:
    size = (cfg.encoder.image_width, cfg.encoder.image_height)
    return {
        "train": generate_toy_dataset(cfg.data.grammar, cfg.data.n_train, derive_seed(cfg.seed, "train-data"),
                                      "train", size),
        "test": generate_toy_dataset(cfg.data.grammar, cfg.data.n_test, derive_seed(cfg.seed, "test-data"),
                                     "test", size),
        "pretrain": generate_toy_dataset(cfg.pretrain.grammar, cfg.pretrain.n_images,
                                         derive_seed(cfg.seed, "pretrain-data"), "train", size),
    }


def pretrain_pack(cfg: ExperimentConfig, corpus: Dataset) -> EncoderPack:
    pack = init_pack(cfg.encoder, derive_seed(cfg.seed, "encoder-init"))
    captions = caption_corpus(corpus, derive_seed(cfg.seed, "captions"))
    return contrastive_pretrain(pack, corpus.images, captions, cfg.pretrain_config())


def protocol_config(cfg: ExperimentConfig, class_names: Sequence[str], variant: str) -> ProtocolConfig:
    return cfg.protocol.build(class_names, variant=variant)


def fit_protocol(pack: EncoderPack, cfg: ExperimentConfig, train: Dataset, variant: str,
                 shots: Optional[int] = None, seed: Optional[int] = None,
                 ) -> Tuple[ProtocolState, Optional[TrainingReport]]:
    """
    Build one protocol and train it when it has trainable parameters.
    ``seed`` overrides the experiment seed for the init/data/augment streams.
    """
    seed = cfg.seed if seed is None else seed
    pconf = protocol_config(cfg, train.class_names, variant)
    state = build_protocol(pack, pconf, derive_seed(seed, "init"))
    params = state.parameters()
    if not params or all(p.n_trainable == 0 for p in params):
        return state, None
    data = train if shots is None else sample_few_shot(train, shots, derive_seed(seed, "shots"))
    tconf = replace(cfg.train, seed=seed, shots=shots)
    return state, train_protocol(state, data, tconf, digest=cfg.digest)


def run_compare(pack: EncoderPack, cfg: ExperimentConfig, train: Dataset, test: Dataset,
                shots: Optional[int] = None, seed: Optional[int] = None,
                keep: Optional[Dict[str, ProtocolState]] = None) -> Dict[str, EvalReport]:
    """All six protocols under one seed, evaluated on ``test``; fitted states go into ``keep``."""
    test_feats = image_features(pack, test.images)
    out = {}
    for variant in COMPARE_ORDER:
        state, _ = fit_protocol(pack, cfg, train, variant, shots, seed)
        if keep is not None:
            keep[variant] = state
        out[variant] = evaluate(lambda _images, s=state: s.probabilities_from_features(test_feats), test)
        log.info("%s top1 %.4f", variant, out[variant].top1)
    return out


def compare_table(reports: Dict[str, EvalReport]) -> Tuple[str, str]:
    """Aligned text and comma-separated renderings of the comparison."""
    width = max(len(v) for v in reports)
    lines = ["protocol".ljust(width) + "".join(c.rjust(15) for c in METRIC_COLUMNS)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("protocol",) + METRIC_COLUMNS)
    for variant, rep in reports.items():
        vals = [rep.metrics()[c] for c in METRIC_COLUMNS]
        lines.append(variant.ljust(width) + "".join(_fmt(v).rjust(15) for v in vals))
        w.writerow([variant] + [_fmt(v) for v in vals])
    return "\n".join(lines) + "\n", buf.getvalue()


def report_csv(report: EvalReport, class_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for key, value in report.metrics().items():
        w.writerow([key, _fmt(value)])
    for name, acc in zip(class_names, report.per_class):
        w.writerow([f"acc:{name}", _fmt(acc)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_split(ws: Workspace, name: str) -> Dataset:
    path = ws.split(name)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} is missing; run gen-data first")
    return load_dataset(path)


def _load_pack(ws: Workspace, cfg: ExperimentConfig) -> EncoderPack:
    if not ws.pack.exists():
        raise FileNotFoundError(f"encoder pack {ws.pack} is missing; run pretrain first")
    return load_pack(ws.pack, cfg.encoder)


def _restore_state(ws: Workspace, cfg: ExperimentConfig, pack: EncoderPack, class_names, protocol: str,
                   shots: Optional[int]) -> ProtocolState:
    pconf = protocol_config(cfg, class_names, protocol)
    state = build_protocol(pack, pconf, derive_seed(cfg.seed, "init"))
    if protocol in TRAINABLE_VARIANTS and state.parameters():
        path = ws.run_dir(ws.run_tag(protocol, shots)) / "checkpoint.dfo"
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} is missing; run train first")
        ckpt = load_checkpoint(path, variant=protocol, digest=cfg.digest, strict_digest=False)
        state.load_state({k: v for k, v in ckpt.tensors.items() if not k.startswith("opt.")})
    return state


def cmd_gen_data(args, cfg: ExperimentConfig, ws: Workspace) -> int:
    for name, ds in make_datasets(cfg).items():
        save_dataset(ds, ws.ensure(ws.split(name)))
        log.info("wrote %s (%d images)", ws.split(name), len(ds))
    return EXIT_OK


def cmd_pretrain(args, cfg: ExperimentConfig, ws: Workspace) -> int:
    corpus = _load_split(ws, "pretrain")
    pack = pretrain_pack(cfg, corpus)
    ws.ensure(ws.root)
    save_pack(pack, ws.pack)
    log.info("wrote %s", ws.pack)
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig, ws: Workspace) -> int:
    protocol = args.protocol or cfg.protocol.variant
    if protocol not in TRAINABLE_VARIANTS:
        raise ConfigError([f"protocol {protocol!r} has nothing to train"])
    pack = _load_pack(ws, cfg)
    train = _load_split(ws, "train")
    state, report = fit_protocol(pack, cfg, train, protocol, args.shots)
    if report is None:
        raise ConfigError([f"protocol {protocol!r} has no trainable parameters under this config"])
    out = ws.ensure(ws.run_dir(ws.run_tag(protocol, args.shots)))
    save_checkpoint(report.checkpoint, out / "checkpoint.dfo")
    _write_text(out / "curve.jsonl", report.to_jsonl())
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig, ws: Workspace) -> int:
    protocol = args.protocol or cfg.protocol.variant
    pack = _load_pack(ws, cfg)
    test = _load_split(ws, "test")
    state = _restore_state(ws, cfg, pack, test.class_names, protocol, args.shots)
    report = evaluate(state.probabilities, test)
    out = ws.ensure(ws.root / "eval" / ws.run_tag(protocol, args.shots))
    _write_text(out / "report.csv", report_csv(report, test.class_names))
    dump_top5(state.probabilities, test, out / "top5.csv")
    print(f"{protocol}: top1 {_fmt(report.top1)} top5 {_fmt(report.top5)} "
          f"class-wise std {_fmt(report.classwise_std)}")
    return EXIT_OK


def cmd_interpret(args, cfg: ExperimentConfig, ws: Workspace) -> int:
    protocol = args.protocol or cfg.protocol.variant
    if protocol not in ("coop", "target-opt", "defo"):
        raise ConfigError([f"protocol {protocol!r} has no query bank to interpret"])
    pack = _load_pack(ws, cfg)
    train = _load_split(ws, "train")
    state = _restore_state(ws, cfg, pack, train.class_names, protocol, args.shots)
    interp = interpret_queries(state.bank, pack)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query", "position", "kind"] + [f"{c}{r}" for r in range(1, 6) for c in ("word", "dist")])
    w.writerows(interp.to_rows())
    out = ws.ensure(ws.root / "interpret") / f"{ws.run_tag(protocol, args.shots)}.csv"
    _write_text(out, buf.getvalue())
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_gradcheck(args, cfg: ExperimentConfig, ws: Workspace) -> int:
    pack = init_pack(cfg.encoder, derive_seed(cfg.seed, "encoder-init")).freeze()
    report = run_suite(pack, cfg.seed)
    text = "\n".join(report.lines()) + "\n"
    _write_text(ws.root / "gradcheck.txt", text)
    print(text, end="")
    if not report.passed:
        raise NumericFailure("gradient check exceeded tolerance")
    return EXIT_OK


def cmd_compare(args, cfg: ExperimentConfig, ws: Workspace) -> int:
    pack = _load_pack(ws, cfg)
    train, test = _load_split(ws, "train"), _load_split(ws, "test")
    reports = run_compare(pack, cfg, train, test, args.shots)
    text, table = compare_table(reports)
    out = ws.ensure(ws.root / "compare")
    tag = "compare" if args.shots is None else f"compare-{args.shots}shot"
    _write_text(out / f"{tag}.txt", text)
    _write_text(out / f"{tag}.csv", table)
    print(text, end="")
    return EXIT_OK


def cmd_export_curves(args, cfg: ExperimentConfig, ws: Workspace) -> int:
    runs = sorted((ws.root / "train").glob("*/curve.jsonl"))
    if not runs:
        raise FileNotFoundError(f"no training curves under {ws.root / 'train'}")
    out = ws.ensure(ws.root / "curves")
    for path in runs:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc"])
        for line in path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            w.writerow([rec["epoch"], _fmt(rec["loss"]), _fmt(rec["train_acc"])])
        _write_text(out / f"{path.parent.name}.csv", buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "interpret": cmd_interpret,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
    "export-curves": cmd_export_curves,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defo", description="Decomposed-query classification on a toy domain.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config file (key = value with [sections])")
        p.add_argument("--seed", type=int, help="overrides [experiment] seed")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        if name in ("train", "eval", "interpret"):
            p.add_argument("--protocol", choices=VARIANTS)
        if name in ("train", "eval", "interpret", "compare"):
            p.add_argument("--shots", type=int, choices=(1, 2, 4, 8, 16))
    return parser


def _setup_logging() -> None:
    level = os.environ.get("DEFO_LOG", "quiet").lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError([f"DEFO_LOG must be one of quiet, info, debug; got {level!r}"])
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg, Workspace(Path(args.out)))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, records.RecordError, nc.ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError, nc.DegenerateVectorError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
