"""Command-line pipeline: stats, make-splits, select, assess, report, gen-sbm.

Stages communicate through files in ``--out``::

    splits.json                      make-splits
    selections/<model>_<variant>.json select
    assessments/<model>_<variant>.json assess
    report.csv, report.json          report

Every artifact embeds the experiment configuration and a SHA-256 of its
inputs. A stage whose artifact already carries the same configuration and
input hash is skipped, and reruns with the same seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import fair_eval as fe
from .core_math import rng_stream
from .graph_data import DATASET_FILES, DatasetFormatError, dataset_stats, generate_sbm, load_dataset, \
    save_dataset
from .models import NonFiniteLossError

log = logging.getLogger("fairgmnn")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    pass


class MissingStageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    model: str = "gcn"
    variant: str = "dense"
    k: int = 10
    r: int = 20
    seed: int | None = None
    strategy: int = 1
    workers: int | None = None
    out: str = "runs"
    reduced_grid: bool = False
    pop_size: int = 100
    generations: int = 10
    runs_per_config: int = 1
    max_epochs: int = 1000
    patience: int = 200
    em_loops: int = 10
    phase_epochs: int = 100
    annealing: float = 0.1

    def validate(self, need_seed: bool = True) -> None:
        if self.model not in fe.MODEL_CHOICES:
            raise InputError("model must be one of %s" % ", ".join(fe.MODEL_CHOICES))
        if self.variant not in fe.VARIANTS:
            raise InputError("variant must be one of %s" % ", ".join(fe.VARIANTS))
        if self.strategy not in (1, 2, 3):
            raise InputError("strategy must be 1, 2 or 3")
        if need_seed and self.seed is None:
            raise InputError("--seed is required (no wall-clock seeding)")
        for name in ("k", "r", "pop_size", "generations", "runs_per_config", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise InputError("%s must be >= 1" % name)
        if self.k < 2:
            raise InputError("k must be >= 2")
        if self.em_loops < 0 or self.phase_epochs < 1:
            raise InputError("em_loops must be >= 0 and phase_epochs >= 1")

    def settings(self) -> fe.SearchSettings:
        return fe.SearchSettings(pop_size=self.pop_size, generations=self.generations, reduced=self.reduced_grid,
                                 runs_per_config=self.runs_per_config, max_epochs=self.max_epochs,
                                 patience=self.patience, em_loops=self.em_loops,
                                 epochs_per_phase=self.phase_epochs, annealing=self.annealing)

    def recorded(self, *names) -> dict:
        """The subset of the config that determines a stage's output."""
        d = asdict(self)
        return {n: d[n] for n in names}

    @property
    def tag(self) -> str:
        tag = "%s_%s" % (self.model, self.variant)
        if fe.is_gmnn(self.model):
            tag += "_s%d" % self.strategy
        return tag


SPLIT_KEYS = ("k", "seed")
SELECT_KEYS = ("model", "variant", "k", "seed", "strategy", "reduced_grid", "pop_size", "generations",
               "runs_per_config", "max_epochs", "patience", "em_loops", "phase_epochs", "annealing")
ASSESS_KEYS = SELECT_KEYS + ("r",)


def load_config_file(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError("cannot read config %s: %s" % (path, exc)) from exc
    try:
        if p.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
    except ValueError as exc:
        raise InputError("config %s: %s" % (path, exc)) from exc
    known = {f.name for f in fields(ExperimentConfig)}
    data = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InputError("config %s: unknown keys %s" % (path, ", ".join(unknown)))
    return data


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise InputError(str(exc)) from exc


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def sha256_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        h.update(p.name.encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def dataset_hash(path) -> str:
    root = Path(path)
    return sha256_files(root / name for name in DATASET_FILES if (root / name).exists())


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def read_artifact(path: Path, stage: str) -> dict:
    if not path.exists():
        raise MissingStageError("missing %s (run the '%s' stage first)" % (path, stage))
    return json.loads(path.read_text(encoding="utf-8"))


def up_to_date(path: Path, config: dict, input_hash: str) -> bool:
    if not path.exists():
        return False
    try:
        old = json.loads(path.read_text(encoding="utf-8"))
    except ValueError:
        return False
    return old.get("config") == config and old.get("input_hash") == input_hash


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load(cfg: ExperimentConfig):
    if cfg.dataset is None:
        raise InputError("--dataset is required")
    return load_dataset(cfg.dataset)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_stats(cfg: ExperimentConfig) -> int:
    graph, data = _load(cfg)
    stats = dataset_stats(graph, data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stats.write(out / "stats.json", out / "label_heatmap.csv")
    print(json.dumps({k: v for k, v in stats.to_json_dict().items() if k != "label_adjacency"}, sort_keys=True))
    return EXIT_OK


def cmd_make_splits(cfg: ExperimentConfig) -> int:
    cfg.validate()
    graph, data = _load(cfg)
    out = Path(cfg.out) / "splits.json"
    config, ihash = cfg.recorded(*SPLIT_KEYS), dataset_hash(cfg.dataset)
    if up_to_date(out, config, ihash):
        log.info("%s is up to date", out)
        return EXIT_OK
    try:
        ss = fe.make_splitset(data, cfg.k, cfg.seed)
    except fe.SplitError as exc:
        raise InputError(str(exc)) from exc
    problems = fe.check_splitset(ss, data)
    if problems:
        raise InputError("generated splits violate invariants: " + "; ".join(problems))
    body = json.loads(ss.to_json())
    body.update(config=config, input_hash=ihash)
    write_text(out, dump_json(body))
    print("wrote %s" % out)
    return EXIT_OK


def _splits(cfg: ExperimentConfig, data) -> tuple[fe.SplitSet, str]:
    path = Path(cfg.out) / "splits.json"
    body = read_artifact(path, "make-splits")
    ss = fe.SplitSet.from_json(json.dumps(body))
    if ss.k != cfg.k:
        raise InputError("splits.json has k=%d but k=%d was requested" % (ss.k, cfg.k))
    return ss, sha256_files([path])


def cmd_select(cfg: ExperimentConfig) -> int:
    cfg.validate()
    graph, data = _load(cfg)
    ss, split_hash = _splits(cfg, data)
    out = Path(cfg.out) / "selections" / (cfg.tag + ".json")
    config = cfg.recorded(*SELECT_KEYS)
    ihash = hashlib.sha256((dataset_hash(cfg.dataset) + split_hash).encode()).hexdigest()
    if up_to_date(out, config, ihash):
        log.info("%s is up to date", out)
        return EXIT_OK
    sels = fe.select_all(cfg.model, graph, data, ss, cfg.variant, cfg.settings(), cfg.seed, cfg.strategy,
                         cfg.workers)
    write_text(out, dump_json({"config": config, "input_hash": ihash,
                               "selections": [s.to_dict() for s in sels]}))
    archive_dir = out.parent / cfg.tag
    archive_dir.mkdir(parents=True, exist_ok=True)
    for s in sels:
        s.search.write_csv(archive_dir / ("archive_split%d.csv" % s.split))
    print("wrote %s" % out)
    return EXIT_OK


def cmd_assess(cfg: ExperimentConfig) -> int:
    cfg.validate()
    graph, data = _load(cfg)
    ss, split_hash = _splits(cfg, data)
    sel_path = Path(cfg.out) / "selections" / (cfg.tag + ".json")
    sel_body = read_artifact(sel_path, "select")
    sels = [fe.SelectionResult.from_dict(d) for d in sel_body["selections"]]
    out = Path(cfg.out) / "assessments" / (cfg.tag + ".json")
    config = cfg.recorded(*ASSESS_KEYS)
    ihash = hashlib.sha256((dataset_hash(cfg.dataset) + split_hash + sha256_files([sel_path])).encode()).hexdigest()
    if up_to_date(out, config, ihash):
        log.info("%s is up to date", out)
        return EXIT_OK
    report = fe.assess(cfg.model, graph, data, ss, sels, cfg.variant, cfg.r, cfg.settings(), cfg.seed,
                       cfg.workers)
    if report.failures == len(report.runs):
        raise NonFiniteLossError("every assessment run failed")
    body = report.to_dict()
    body.update(config=config, input_hash=ihash)
    write_text(out, dump_json(body))
    print("wrote %s" % out)
    for label, cell in fe.report_rows(report):
        print("%-24s %s" % (label, cell))
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig) -> int:
    adir = Path(cfg.out) / "assessments"
    paths = sorted(adir.glob("*.json")) if adir.is_dir() else []
    if not paths:
        raise MissingStageError("no assessments in %s (run the 'assess' stage first)" % adir)
    reports = [fe.AssessmentReport.from_dict(json.loads(p.read_text(encoding="utf-8"))) for p in paths]
    table = fe.render_table(reports)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(table)
    out = Path(cfg.out)
    write_text(out / "report.csv", buf.getvalue())
    body = {"input_hash": sha256_files(paths), "sources": [p.name for p in paths],
            "reports": [r.to_dict() | {"config": json.loads(p.read_text(encoding="utf-8")).get("config")}
                        for r, p in zip(reports, paths)]}
    for r in body["reports"]:
        r.pop("runs")
    write_text(out / "report.json", dump_json(body))
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_gen_sbm(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    if cfg.seed is None:
        raise InputError("--seed is required (no wall-clock seeding)")
    try:
        blocks = [int(b) for b in args.blocks.split(",")]
        graph, data = generate_sbm(blocks, args.intra_p, args.inter_p, args.feature_signal,
                                   rng_stream(cfg.seed), num_features=args.num_features, name=args.name)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    save_dataset(cfg.out, graph, data)
    print("wrote %s (%d nodes, %d edges)" % (cfg.out, graph.num_nodes, graph.num_edges))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML file with any of the options below")
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int, help="number of folds (default 10)")
    common.add_argument("--model", choices=fe.MODEL_CHOICES)
    common.add_argument("--variant", choices=fe.VARIANTS)
    common.add_argument("--r", type=int, help="assessment runs per split (default 20)")
    common.add_argument("--strategy", type=int, choices=(1, 2, 3), help="GMNN beta strategy (default 1)")
    common.add_argument("--workers", type=int, help="parallel jobs (default: all cores)")
    common.add_argument("--reduced-grid", dest="reduced_grid", action="store_true", default=None)
    budget = common.add_argument_group("search budget overrides")
    budget.add_argument("--pop-size", dest="pop_size", type=int)
    budget.add_argument("--generations", type=int)
    budget.add_argument("--runs-per-config", dest="runs_per_config", type=int)
    budget.add_argument("--max-epochs", dest="max_epochs", type=int)
    budget.add_argument("--patience", type=int)
    budget.add_argument("--em-loops", dest="em_loops", type=int)
    budget.add_argument("--phase-epochs", dest="phase_epochs", type=int)
    budget.add_argument("--annealing", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fairgmnn", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("stats", parents=[common], help="dataset statistics and label heatmap")
    sub.add_parser("make-splits", parents=[common], help="stratified k-fold splits")
    sub.add_parser("select", parents=[common], help="per-split hyperparameter search")
    sub.add_parser("assess", parents=[common], help="r runs per split with the selected hyperparameters")
    sub.add_parser("report", parents=[common], help="render all assessments as a table")
    g = sub.add_parser("gen-sbm", parents=[common], help="write a synthetic SBM dataset to --out")
    g.add_argument("--blocks", default="400,400,400,400,400", help="comma-separated block sizes")
    g.add_argument("--intra-p", dest="intra_p", type=float, default=0.02)
    g.add_argument("--inter-p", dest="inter_p", type=float, default=0.002)
    g.add_argument("--feature-signal", dest="feature_signal", type=float, default=0.05)
    g.add_argument("--num-features", dest="num_features", type=int)
    g.add_argument("--name", default="sbm")
    return parser


COMMANDS = {"stats": cmd_stats, "make-splits": cmd_make_splits, "select": cmd_select, "assess": cmd_assess,
            "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-sbm":
            return cmd_gen_sbm(cfg, args)
        return COMMANDS[args.command](cfg)
    except (InputError, DatasetFormatError, fe.SplitError, FileNotFoundError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_INPUT
    except MissingStageError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteLossError, FloatingPointError) as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
