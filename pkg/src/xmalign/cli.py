"""Command-line entry point: data generation, training, evaluation, ablation, reports.

Every command writes into ``--out``; a run directory holds everything needed
to re-render its report (config echo, splits, logs, checkpoints, results).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence,
5 I/O error.  Failures print one line ``error[<category>]: <message>`` to
standard error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import (
    ConfigError,
    FeatureTable,
    FormatError,
    IntegrityError,
    SamplingError,
    SplitSpec,
    SynthConfig,
    load_features,
    make_splits,
    parse_ratio,
    save_features,
    synth_dataset,
)
from .losses import LossWeights
from .model import ConfigurationError, VaeDims, load_checkpoint, save_checkpoint
from .train import DivergenceError, HyperParams, preset, synthetic_dims, train
from .zsl import ABLATION_VARIANTS, ablation_csv, fit_and_evaluate, run_ablation, split_seed, summarize

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
FULL_SCALE_DIMS = (512, 1024)
CONFIG_KEYS = {"preset", "hyperparams", "synth", "data", "ratio", "splits", "seed", "mode", "modes"}


class CliError(Exception):
    def __init__(self, code: int, category: str, message: str):
        super().__init__(message)
        self.code = code
        self.category = category


@dataclass
class RunConfig:
    """Everything a run needs; echoed verbatim into the run directory."""

    preset: str
    hyperparams: HyperParams
    mode: str
    ratio: str
    num_splits: int
    seed: int
    out: str
    synth: SynthConfig | None = None
    visual_path: str | None = None
    descriptor_path: str | None = None
    modes: tuple[str, ...] = ("zsl", "gzsl")
    overrides: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = {
            "preset": self.preset,
            "hyperparams": self.hyperparams.to_json(),
            "mode": self.mode,
            "ratio": self.ratio,
            "splits": self.num_splits,
            "seed": self.seed,
            "modes": list(self.modes),
            "overrides": self.overrides,
        }
        if self.synth is not None:
            doc["synth"] = asdict(self.synth)
        else:
            doc["data"] = {"visual": self.visual_path, "descriptors": self.descriptor_path}
        return doc


# ------------------------------------------------------------------ helpers


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, "config", f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CliError(EXIT_CONFIG, "config", f"{path}: expected a JSON object")
    return doc


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_table(cfg: RunConfig) -> FeatureTable:
    if cfg.synth is not None:
        return synth_dataset(cfg.synth).table
    return load_features(cfg.visual_path, cfg.descriptor_path)


def _default_ratio(num_classes: int) -> str:
    if num_classes == 70:
        return "60/10"
    unseen = max(1, num_classes // 5)
    return f"{num_classes - unseen}/{unseen}"


def _build_hp(name: str, overrides: dict, data_dims: tuple[int, int], seed: int) -> HyperParams:
    hp = preset(name)
    ov = dict(overrides)
    weights = ov.pop("weights", {})
    dims = ov.pop("dims", None)
    unknown = set(ov) - set(HyperParams.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
    if not isinstance(weights, dict):
        raise ConfigError("hyperparams.weights must be an object")
    w = LossWeights(**{**asdict(hp.weights), **weights})
    if dims is not None:
        d = VaeDims(**{**asdict(hp.dims), **dims})
    elif tuple(data_dims) == FULL_SCALE_DIMS:
        d = hp.dims
    else:
        d = synthetic_dims(*data_dims)
    if (d.visual_dim, d.semantic_dim) != tuple(data_dims):
        raise ConfigError(
            f"model dims {d.visual_dim}/{d.semantic_dim} do not match data dims {data_dims[0]}/{data_dims[1]}"
        )
    hp = replace(hp, weights=w, dims=d, seed=seed, **ov)
    hp.validate()
    if hp.learning_rate <= 0:
        raise ConfigError(f"learning_rate must be > 0, got {hp.learning_rate}")
    return hp


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge the optional JSON config with command-line flags and validate."""
    doc = _read_json(args.config) if getattr(args, "config", None) else {}
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    name = args.preset or doc.get("preset") or "zsl"
    if name not in ("zsl", "gzsl"):
        raise ConfigError(f"preset must be 'zsl' or 'gzsl', got {name!r}")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    if "data" in doc and "synth" in doc:
        raise ConfigError("give either 'data' paths or a 'synth' config, not both")

    synth = visual = descriptors = None
    if "data" in doc:
        data = doc["data"]
        visual, descriptors = data.get("visual"), data.get("descriptors")
        for p in (visual, descriptors):
            if not p or not Path(p).exists():
                raise ConfigError(f"data path does not exist: {p!r}")
        table = load_features(visual, descriptors)
        data_dims = (table.visual_dim, table.semantic_dim)
        num_classes = table.num_classes
    else:
        fields = doc.get("synth", {})
        unknown = set(fields) - set(SynthConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
        synth = SynthConfig(**{"seed": seed, **fields})
        synth.validate()
        data_dims = (synth.visual_dim, synth.semantic_dim)
        num_classes = synth.num_classes

    overrides = doc.get("hyperparams", {})
    if not isinstance(overrides, dict):
        raise ConfigError("hyperparams must be an object")
    hp = _build_hp(name, overrides, data_dims, seed)
    ratio = args.ratio or doc.get("ratio") or _default_ratio(num_classes)
    n_seen, n_unseen = parse_ratio(ratio)
    if n_seen + n_unseen != num_classes:
        raise ConfigError(f"ratio {ratio} does not cover the {num_classes} classes")
    num_splits = args.splits if args.splits is not None else doc.get("splits", 5)
    if not isinstance(num_splits, int) or num_splits < 1:
        raise ConfigError(f"splits must be a positive integer, got {num_splits!r}")
    mode = doc.get("mode", name)
    modes = tuple(doc.get("modes", ("zsl", "gzsl")))
    for m in (mode, *modes):
        if m not in ("zsl", "gzsl"):
            raise ConfigError(f"mode must be 'zsl' or 'gzsl', got {m!r}")
    return RunConfig(
        preset=name,
        hyperparams=hp,
        mode=mode,
        ratio=f"{n_seen}/{n_unseen}",
        num_splits=num_splits,
        seed=seed,
        out=args.out,
        synth=synth,
        visual_path=visual,
        descriptor_path=descriptors,
        modes=modes,
        overrides=overrides,
    )


def config_from_run_dir(run_dir: Path) -> RunConfig:
    doc = _read_json(run_dir / "config.json")
    synth = SynthConfig(**doc["synth"]) if "synth" in doc else None
    data = doc.get("data", {})
    return RunConfig(
        preset=doc["preset"],
        hyperparams=HyperParams.from_json(doc["hyperparams"]),
        mode=doc["mode"],
        ratio=doc["ratio"],
        num_splits=doc["splits"],
        seed=doc["seed"],
        out=str(run_dir),
        synth=synth,
        visual_path=data.get("visual"),
        descriptor_path=data.get("descriptors"),
        modes=tuple(doc.get("modes", ("zsl", "gzsl"))),
        overrides=doc.get("overrides", {}),
    )


class _SplitLog:
    """Adds the split index to each JSON line the trainer writes."""

    def __init__(self, fh, split_index: int):
        self.fh = fh
        self.split_index = split_index

    def write(self, line: str) -> None:
        rec = json.loads(line)
        self.fh.write(json.dumps({"split": self.split_index, **rec}) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot create {out}: {exc.strerror or exc}") from None
    return out


def _print_summary(report: dict) -> None:
    keys = list(report["mean"])
    print("split  " + "  ".join(f"{k:>9}" for k in keys))
    for r in report["per_split"]:
        print(f"{r['split_index']:>5}  " + "  ".join(f"{r[k]:9.4f}" for k in keys))
    print(" mean  " + "  ".join(f"{report['mean'][k]:9.4f}" for k in keys))


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    fields = doc.get("synth", {})
    unknown = set(fields) - set(SynthConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown synth fields: {sorted(unknown)}")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    cfg = SynthConfig(**{"seed": seed, **fields})
    cfg.validate()
    table = synth_dataset(cfg).table
    out = _out_dir(args.out)
    save_features(table, out / "visual.csv", out / "descriptors.csv")
    _write_json(out / "synth_config.json", asdict(cfg))
    print(f"wrote {len(table.labels)} visual rows, {table.num_classes} classes to {out}")
    return EXIT_OK


def _splits_for(cfg: RunConfig, table: FeatureTable) -> list[SplitSpec]:
    return make_splits(table.num_classes, cfg.ratio, cfg.num_splits, cfg.seed, table=table)


def _evaluate_split(cfg, table, split, model) -> dict:
    s = split_seed(cfg.seed, split.split_index)
    return {"split_index": split.split_index, **fit_and_evaluate(model, table, split, cfg.hyperparams, cfg.mode, s)}


def _report(cfg: RunConfig, per_split: list[dict]) -> dict:
    for r in per_split:
        r["per_class"] = {str(k): v for k, v in r["per_class"].items()}
    mean, std = summarize(per_split, cfg.mode)
    return {
        "mode": cfg.mode,
        "ratio": cfg.ratio,
        "per_split": per_split,
        "mean": mean,
        "std": std,
        "config_echo": cfg.hyperparams.to_json(),
    }


def cmd_train(args) -> int:
    cfg = build_config(args)
    table = _load_table(cfg)
    out = _out_dir(cfg.out)
    _write_json(out / "config.json", cfg.to_json())
    splits = _splits_for(cfg, table)
    _write_json(out / "splits.json", [s.to_json() for s in splits])
    (out / "checkpoints").mkdir(exist_ok=True)
    per_split = []
    with open(out / "log.jsonl", "w") as fh:
        for split in splits:
            s = split_seed(cfg.seed, split.split_index)
            result = train(table, split, cfg.hyperparams, mode=cfg.mode, seed=s, log=_SplitLog(fh, split.split_index))
            save_checkpoint(result.model, out / "checkpoints" / f"split{split.split_index}.json")
            per_split.append(_evaluate_split(cfg, table, split, result.model))
    report = _report(cfg, per_split)
    _write_json(out / "report.json", report)
    _print_summary(report)
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.out)
    cfg = config_from_run_dir(run_dir)
    table = _load_table(cfg)
    splits = [SplitSpec.from_json(d) for d in _read_json_list(run_dir / "splits.json")]
    per_split = []
    for split in splits:
        try:
            model = load_checkpoint(run_dir / "checkpoints" / f"split{split.split_index}.json")
        except OSError as exc:
            raise CliError(EXIT_IO, "io", f"missing checkpoint for split {split.split_index}: {exc}") from None
        per_split.append(_evaluate_split(cfg, table, split, model))
    report = _report(cfg, per_split)
    _write_json(run_dir / "eval_report.json", report)
    _print_summary(report)
    return EXIT_OK


def _read_json_list(path: Path) -> list:
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, "io", f"cannot read {path}: {exc.strerror or exc}") from None


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    table = _load_table(cfg)
    out = _out_dir(cfg.out)
    dims = (table.visual_dim, table.semantic_dim)
    hp_zsl = _build_hp("zsl", cfg.overrides, dims, cfg.seed)
    hp_gzsl = _build_hp("gzsl", cfg.overrides, dims, cfg.seed)
    _write_json(out / "config.json", cfg.to_json())
    report = run_ablation(
        table, cfg.ratio, hp_zsl, num_splits=cfg.num_splits, seed=cfg.seed, modes=cfg.modes, hp_gzsl=hp_gzsl
    )
    for d in report["details"].values():
        for r in d["per_split"]:
            r["per_class"] = {str(k): v for k, v in r["per_class"].items()}
    _write_json(out / "ablation.json", report)
    csv = ablation_csv(report)
    (out / "ablation.csv").write_text(csv)
    print(csv, end="")
    return EXIT_OK


def _svg_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "xmalign"
    return plt


def plot_loss_curves(log_path: Path, svg_path: Path) -> None:
    curves: dict[int, list[float]] = {}
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "epoch_summary" in rec:
                curves.setdefault(rec.get("split", 0), []).append(rec["total"])
    plt = _svg_setup()
    fig, ax = plt.subplots(figsize=(6, 4))
    for split, ys in sorted(curves.items()):
        ax.plot(np.arange(1, len(ys) + 1), ys, label=f"split {split}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean total loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_ablation_bars(report: dict, svg_path: Path) -> None:
    rows = report["rows"]
    modes = [m for m in ("zsl", "gzsl") if any(r.get(m) is not None for r in rows)]
    plt = _svg_setup()
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(rows))
    width = 0.8 / max(len(modes), 1)
    for i, m in enumerate(modes):
        ax.bar(x + i * width, [r.get(m) or 0.0 for r in rows], width, label=m.upper())
    ax.set_xticks(x + width * (len(modes) - 1) / 2)
    ax.set_xticklabels([r["variant"] for r in rows])
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(args) -> int:
    run_dir = Path(args.out)
    found = False
    if (run_dir / "report.json").exists():
        found = True
        report = _read_json(run_dir / "report.json")
        print(f"{report['mode'].upper()} {report['ratio']}")
        _print_summary(report)
        if (run_dir / "log.jsonl").exists():
            plot_loss_curves(run_dir / "log.jsonl", run_dir / "loss_curves.svg")
    if (run_dir / "ablation.json").exists():
        found = True
        report = _read_json(run_dir / "ablation.json")
        print(f"ablation {report['ratio']}")
        print(ablation_csv(report), end="")
        plot_ablation_bars(report, run_dir / "accuracy_bars.svg")
    if not found:
        raise CliError(EXIT_IO, "io", f"no report or ablation results in {run_dir}")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, run=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", required=True, help="output directory")
        if run:
            p.add_argument("--preset", choices=("zsl", "gzsl"))
            p.add_argument("--ratio", help="seen/unseen class counts, e.g. 60/10")
            p.add_argument("--splits", type=int, help="number of seen/unseen splits")

    common(sub.add_parser("gen-data", help="write a synthetic feature table"), run=False)
    common(sub.add_parser("train", help="train and evaluate on every split"))
    common(sub.add_parser("ablate", help="train the six contrastive-loss variants"))
    p = sub.add_parser("eval", help="re-evaluate the checkpoints of a run directory")
    p.add_argument("--out", required=True, help="run directory")
    p = sub.add_parser("report", help="summarize a run directory and write plots")
    p.add_argument("--out", required=True, help="run directory")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, CliError):
        return exc.code, exc.category
    if isinstance(exc, (DivergenceError, FloatingPointError, nx.NumericError)):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, (FormatError, IntegrityError, SamplingError, nx.DimensionError)):
        return EXIT_DATA, "data"
    if isinstance(exc, OSError):
        return EXIT_IO, "io"
    if isinstance(exc, (ConfigError, ConfigurationError, ValueError, TypeError, KeyError)):
        return EXIT_CONFIG, "config"
    raise exc


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        code, category = _classify(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error[{category}]: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
