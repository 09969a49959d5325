"""Batch command-line front door composing the whole experiment chain.

Subcommands mirror the workflow one stage per command: ``corpus synth``,
``corpus ingest``, ``attributes``, ``fit-transform``, ``train``, ``eval``,
``export-plots`` and ``replicate`` (the full regularizer-by-gamma grid).
Outputs are written atomically; every command is deterministic given its
inputs and seed.  Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.  Set ARGON_LOG=debug|info|warning for verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attributes as attr_mod
from . import gaussianize, latent_metrics, melody_core, smf_ingest, vib
from .attributes import AttributeKind, AttributeTable, AttributeValueError
from .autograd_nn import GradientCheckError
from .gaussianize import (
    DegenerateSampleError,
    FitError,
    PowerTransformParams,
    TransformDomainError,
)
from .latent_metrics import MetricError
from .melody_core import Corpus, MelodyError, SynthConfig
from .smf_ingest import SmfParseError
from .vib import ConfigError, RegularizerKind, TrainConfig

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

RESULT_FIELDS = (
    "regularizer",
    "gamma",
    "attribute",
    "rho_s",
    "oa",
    "jsd",
    "mmd",
    "mmd_raw",
    "excluded",
)


class UsageError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        raise UsageError(message)


# ---------------------------------------------------------------------------
# small IO helpers


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.parent / f".{path.name}.tmp{os.getpid()}"
    tmp.write_text(text)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _format_csv(rows: list[dict], fields: tuple[str, ...]) -> str:
    lines = [",".join(fields)]
    for row in rows:
        lines.append(",".join(_csv_cell(row[f]) for f in fields))
    return "\n".join(lines) + "\n"


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return repr(float(value))  # plain repr even for numpy scalars
    return str(value)


# ---------------------------------------------------------------------------
# experiment manifest


@dataclass
class ExperimentManifest:
    """What a training run consumed and produced, with content hashes.

    Paths are stored relative to the manifest's own directory; ``verify``
    recomputes all hashes and rejects any drift.
    """

    corpus: str
    attributes: str
    checkpoint: str
    transform: str | None = None
    results: str | None = None
    train_config: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentManifest":
        return cls(**json.loads(text))

    def referenced_files(self) -> list[str]:
        files = [self.corpus, self.attributes]
        if self.transform:
            files.append(self.transform)
        files.extend([self.checkpoint + ".bin", self.checkpoint + ".json"])
        if self.results:
            files.append(self.results)
        return files

    def compute_hashes(self, root: Path) -> dict:
        return {rel: _sha256(root / rel) for rel in self.referenced_files()}

    def verify(self, root: Path) -> None:
        for rel in self.referenced_files():
            path = root / rel
            if not path.exists():
                raise ManifestError(f"manifest references missing file {rel}")
            actual = _sha256(path)
            if self.hashes.get(rel) != actual:
                raise ManifestError(
                    f"hash mismatch for {rel}: manifest has {self.hashes.get(rel)}, file is {actual}"
                )

    def save(self, path: Path) -> None:
        _atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: Path) -> "ExperimentManifest":
        try:
            return cls.from_json(path.read_text())
        except (json.JSONDecodeError, TypeError) as exc:
            raise ManifestError(f"unreadable manifest {path}: {exc}") from exc


def _config_to_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["attribute"] = cfg.attribute.value
    return out


def _config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    reg = data.pop("regularizer")
    transform = reg.get("transform")
    regularizer = RegularizerKind(
        kind=reg["kind"],
        gamma=reg["gamma"],
        delta=reg.get("delta", 10.0),
        transform=PowerTransformParams(**transform) if transform else None,
    )
    data["attribute"] = AttributeKind.from_name(data["attribute"])
    return TrainConfig(regularizer=regularizer, **data)


# ---------------------------------------------------------------------------
# TOML-style config file (flags win over file values)


def _parse_config_file(path: Path) -> dict:
    try:
        import tomllib  # Python >= 3.11

        return tomllib.loads(path.read_text())
    except ModuleNotFoundError:
        return _parse_flat_toml(path.read_text())


def _parse_flat_toml(text: str) -> dict:
    """Flat key = value subset: strings, numbers, booleans, # comments."""
    data: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        data[key] = _parse_toml_value(value, lineno)
    return data


def _parse_toml_value(value: str, lineno: int):
    if value.startswith('"') and value.endswith('"') and len(value) >= 2:
        return value[1:-1]
    if value in ("true", "false"):
        return value == "true"
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        raise UsageError(f"config line {lineno}: cannot parse value {value!r}")


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> _Parser:
    parser = _Parser(prog="argon", description=__doc__)
    parser.add_argument("--config", type=Path, help="optional TOML-style config file")
    sub = parser.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="build a corpus")
    corpus_sub = corpus.add_subparsers(dest="corpus_command", required=True)
    synth = corpus_sub.add_parser("synth", help="generate a synthetic corpus")
    synth.add_argument("--size", type=int, default=2048)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", type=Path, required=True)
    ingest = corpus_sub.add_parser("ingest", help="extract melodies from .mid files")
    ingest.add_argument("directory", type=Path)
    ingest.add_argument("--out", type=Path, required=True)

    attrs = sub.add_parser("attributes", help="compute the attribute table")
    attrs.add_argument("--corpus", type=Path, required=True)
    attrs.add_argument("--out", type=Path, required=True)

    fit = sub.add_parser("fit-transform", help="fit the power transform on the train split")
    fit.add_argument("--corpus", type=Path, required=True)
    fit.add_argument("--attributes", type=Path, required=True)
    fit.add_argument("--attribute", choices=[k.value for k in AttributeKind], default="contour")
    fit.add_argument("--out", type=Path, required=True)

    train = sub.add_parser("train", help="train one regularized model")
    _add_train_flags(train)
    train.add_argument("--corpus", type=Path, required=True)
    train.add_argument("--attributes", type=Path, required=True)
    train.add_argument("--transform", type=Path, help="fitted transform (required for --reg pt)")
    train.add_argument("--out", type=Path, required=True)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    evaluate.add_argument("--checkpoint", type=Path, required=True, help="checkpoint base path (no extension)")
    evaluate.add_argument("--corpus", type=Path, required=True)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--out", type=Path, required=True)

    plots = sub.add_parser("export-plots", help="write scatter and density CSVs for a checkpoint")
    plots.add_argument("--checkpoint", type=Path, required=True)
    plots.add_argument("--corpus", type=Path, required=True)
    plots.add_argument("--seed", type=int, default=0)
    plots.add_argument("--out", type=Path, required=True)

    replicate = sub.add_parser(
        "replicate", help="run the 6-cell regularizer-by-gamma grid and tabulate metrics"
    )
    replicate.add_argument("--size", type=int, default=2048)
    replicate.add_argument("--seed", type=int, default=0)
    replicate.add_argument("--attribute", choices=[k.value for k in AttributeKind], default="contour")
    replicate.add_argument("--iters", type=int, default=3000)
    replicate.add_argument("--batch", type=int, default=64)
    replicate.add_argument("--latent-dim", type=int, default=16)
    replicate.add_argument("--hidden", type=int, default=64)
    replicate.add_argument("--embed", type=int, default=16)
    replicate.add_argument("--beta-max", type=float, default=1e-3)
    replicate.add_argument("--delta", type=float, default=10.0)
    replicate.add_argument("--jobs", type=int, default=1, help="train cells in parallel")
    replicate.add_argument("--out", type=Path, required=True)
    return parser


def _add_train_flags(parser) -> None:
    parser.add_argument("--attribute", choices=[k.value for k in AttributeKind], default="contour")
    parser.add_argument("--reg", choices=["nm", "pl", "pt"], required=True)
    parser.add_argument("--gamma", type=float, default=1.0)
    parser.add_argument("--beta-max", type=float, default=1e-3)
    parser.add_argument("--delta", type=float, default=10.0)
    parser.add_argument("--iters", type=int, default=3000)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--latent-dim", type=int, default=16)
    parser.add_argument("--reg-index", type=int, default=0)
    parser.add_argument("--hidden", type=int, default=64)
    parser.add_argument("--embed", type=int, default=16)
    parser.add_argument("--tf-k", type=float, default=500.0)
    parser.add_argument("--seed", type=int, default=0)


# ---------------------------------------------------------------------------
# shared command plumbing


def _load_corpus(path: Path) -> Corpus:
    if not path.exists():
        raise MelodyError(f"corpus file not found: {path}")
    return Corpus.load(path)


def _load_attributes(path: Path, corpus: Corpus) -> AttributeTable:
    if not path.exists():
        raise AttributeValueError(f"attribute table not found: {path}")
    return AttributeTable.load_csv(path, size=len(corpus))


def _train_config_from_args(args, transform: PowerTransformParams | None) -> TrainConfig:
    regularizer = RegularizerKind(
        kind=args.reg, gamma=args.gamma, delta=args.delta, transform=transform
    )
    return TrainConfig(
        regularizer=regularizer,
        attribute=AttributeKind.from_name(args.attribute),
        iterations=args.iters,
        batch_size=args.batch,
        latent_dim=args.latent_dim,
        reg_index=args.reg_index,
        beta_max=args.beta_max,
        tf_k=args.tf_k,
        hidden_size=args.hidden,
        embed_size=args.embed,
        seed=args.seed,
    )


def _write_train_outputs(
    out: Path,
    result: vib.TrainResult,
    cfg: TrainConfig,
    corpus_path: Path,
    attributes_path: Path,
    transform_path: Path | None,
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    base = out / "checkpoint"
    tmp_base = out / f".checkpoint.tmp{os.getpid()}"
    vib.save_model(tmp_base, result.model, {"train_config": _config_to_dict(cfg)})
    os.replace(tmp_base.with_suffix(".bin"), base.with_suffix(".bin"))
    os.replace(tmp_base.with_suffix(".json"), base.with_suffix(".json"))
    _atomic_write_text(
        out / "train_log.csv", _format_csv(result.log_rows, vib.LOG_FIELDS)
    )
    manifest = ExperimentManifest(
        corpus=os.path.relpath(corpus_path.resolve(), out.resolve()),
        attributes=os.path.relpath(attributes_path.resolve(), out.resolve()),
        checkpoint="checkpoint",
        transform=(
            os.path.relpath(transform_path.resolve(), out.resolve())
            if transform_path
            else None
        ),
        train_config=_config_to_dict(cfg),
    )
    manifest.hashes = manifest.compute_hashes(out)
    manifest.save(out / "manifest.json")


def _eval_checkpoint(
    checkpoint: Path, corpus_path: Path, seed: int
) -> tuple[latent_metrics.MetricsReport, latent_metrics.EvalData]:
    manifest_path = checkpoint.parent / "manifest.json"
    if manifest_path.exists():
        ExperimentManifest.load(manifest_path).verify(checkpoint.parent)
    model, metadata = vib.load_model(checkpoint)
    train_config = metadata.get("train_config", {})
    kind = AttributeKind.from_name(train_config.get("attribute", "contour"))
    corpus = _load_corpus(corpus_path)
    test_tokens = corpus.to_array(corpus.indices("test"))
    if test_tokens.shape[0] == 0:
        raise MelodyError("corpus has no test split")
    regularizer = train_config.get("regularizer", {})
    return latent_metrics.evaluate_model(
        model,
        test_tokens,
        kind,
        seed=seed,
        regularizer=regularizer.get("kind", ""),
        gamma=regularizer.get("gamma", float("nan")),
    )


def _report_row(report: latent_metrics.MetricsReport) -> dict:
    return {
        "regularizer": report.regularizer,
        "gamma": report.gamma,
        "attribute": report.attribute,
        "rho_s": report.rho_s,
        "oa": report.oa,
        "jsd": report.jsd,
        "mmd": report.mmd,
        "mmd_raw": report.mmd_raw,
        "excluded": report.excluded,
    }


def _write_plot_data(out: Path, data: latent_metrics.EvalData) -> None:
    out.mkdir(parents=True, exist_ok=True)
    scatter_rows = []
    for k, row_index in enumerate(data.included):
        scatter_rows.append(
            {
                "z_reg": float(data.z_reg[row_index]),
                "z_other": float(data.z_other[row_index]),
                "a_star": float(data.a_star[k]),
            }
        )
    _atomic_write_text(
        out / "scatter.csv", _format_csv(scatter_rows, ("z_reg", "z_other", "a_star"))
    )
    density_rows = [
        {
            "x": float(x),
            "posterior": float(p),
            "prior": float(q),
        }
        for x, p, q in zip(data.posterior.xs, data.posterior.density, data.prior.density)
    ]
    _atomic_write_text(
        out / "density.csv", _format_csv(density_rows, ("x", "posterior", "prior"))
    )


# ---------------------------------------------------------------------------
# commands


def _cmd_corpus_synth(args) -> int:
    corpus = melody_core.generate_synthetic_corpus(
        SynthConfig(size=args.size), seed=args.seed
    )
    args.out.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(args.out / "corpus.txt", corpus.dumps())
    print(args.out / "corpus.txt")
    return EXIT_OK


def _cmd_corpus_ingest(args) -> int:
    if not args.directory.is_dir():
        raise MelodyError(f"not a directory: {args.directory}")
    corpus = smf_ingest.ingest_directory(args.directory)
    args.out.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(args.out / "corpus.txt", corpus.dumps())
    log.info("ingested %d windows from %s", len(corpus), args.directory)
    print(args.out / "corpus.txt")
    return EXIT_OK


def _cmd_attributes(args) -> int:
    corpus = _load_corpus(args.corpus)
    table = attr_mod.compute_attribute_table(corpus)
    args.out.mkdir(parents=True, exist_ok=True)
    target = args.out / "attributes.csv"
    tmp = args.out / f".attributes.csv.tmp{os.getpid()}"
    table.save_csv(tmp)
    os.replace(tmp, target)
    print(target)
    return EXIT_OK


def _cmd_fit_transform(args) -> int:
    corpus = _load_corpus(args.corpus)
    table = _load_attributes(args.attributes, corpus)
    kind = AttributeKind.from_name(args.attribute)
    values = table.column(kind)[corpus.indices("train")]
    values = values[np.isfinite(values)]
    params = gaussianize.fit_power_transform(values, attribute_kind=kind.value)
    args.out.mkdir(parents=True, exist_ok=True)
    target = args.out / f"transform_{kind.value}.json"
    _atomic_write_text(target, params.to_json())
    print(target)
    return EXIT_OK


def _cmd_train(args) -> int:
    corpus = _load_corpus(args.corpus)
    table = _load_attributes(args.attributes, corpus)
    transform = None
    if args.reg == "pt":
        if args.transform is None:
            raise UsageError("--reg pt requires --transform")
        transform = PowerTransformParams.load(args.transform)
    cfg = _train_config_from_args(args, transform)
    result = vib.train(cfg, corpus, table)
    _write_train_outputs(args.out, result, cfg, args.corpus, args.attributes, args.transform)
    print(args.out / "checkpoint")
    return EXIT_OK


def _cmd_eval(args) -> int:
    report, data = _eval_checkpoint(args.checkpoint, args.corpus, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(
        args.out / "results.csv", _format_csv([_report_row(report)], RESULT_FIELDS)
    )
    _write_plot_data(args.out, data)
    print(args.out / "results.csv")
    return EXIT_OK


def _cmd_export_plots(args) -> int:
    _report, data = _eval_checkpoint(args.checkpoint, args.corpus, args.seed)
    _write_plot_data(args.out, data)
    print(args.out / "scatter.csv")
    return EXIT_OK


REPLICATE_CELLS = tuple(
    (reg, gamma) for gamma in (1e-3, 1.0) for reg in ("nm", "pl", "pt")
)


def _replicate_cell(payload: dict) -> dict:
    """Train and evaluate one grid cell (runs in a worker process)."""
    out = Path(payload["out"])
    corpus = _load_corpus(Path(payload["corpus"]))
    table = _load_attributes(Path(payload["attributes"]), corpus)
    cfg = _config_from_dict(payload["config"])
    result = vib.train(cfg, corpus, table)
    _write_train_outputs(
        out,
        result,
        cfg,
        Path(payload["corpus"]),
        Path(payload["attributes"]),
        Path(payload["transform"]) if payload["transform"] else None,
    )
    report, data = _eval_checkpoint(out / "checkpoint", Path(payload["corpus"]), cfg.seed)
    _write_plot_data(out, data)
    row = _report_row(report)
    _atomic_write_text(out / "results.csv", _format_csv([row], RESULT_FIELDS))
    return row


def _cmd_replicate(args) -> int:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    kind = AttributeKind.from_name(args.attribute)

    corpus_path = out / "corpus.txt"
    corpus = melody_core.generate_synthetic_corpus(SynthConfig(size=args.size), seed=args.seed)
    _atomic_write_text(corpus_path, corpus.dumps())

    table = attr_mod.compute_attribute_table(corpus)
    attributes_path = out / "attributes.csv"
    tmp = out / f".attributes.csv.tmp{os.getpid()}"
    table.save_csv(tmp)
    os.replace(tmp, attributes_path)

    train_values = table.column(kind)[corpus.indices("train")]
    train_values = train_values[np.isfinite(train_values)]
    params = gaussianize.fit_power_transform(train_values, attribute_kind=kind.value)
    transform_path = out / f"transform_{kind.value}.json"
    _atomic_write_text(transform_path, params.to_json())

    payloads = []
    for reg, gamma in REPLICATE_CELLS:
        cell_dir = out / f"{reg}_gamma{gamma:g}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        regularizer = RegularizerKind(
            kind=reg,
            gamma=gamma,
            delta=args.delta,
            transform=params if reg == "pt" else None,
        )
        cfg = TrainConfig(
            regularizer=regularizer,
            attribute=kind,
            iterations=args.iters,
            batch_size=args.batch,
            latent_dim=args.latent_dim,
            beta_max=args.beta_max,
            hidden_size=args.hidden,
            embed_size=args.embed,
            seed=args.seed,
        )
        payloads.append(
            {
                "out": str(cell_dir),
                "corpus": str(corpus_path),
                "attributes": str(attributes_path),
                "transform": str(transform_path) if reg == "pt" else None,
                "config": _config_to_dict(cfg),
            }
        )

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_replicate_cell, payloads))
    else:
        rows = [_replicate_cell(p) for p in payloads]

    _atomic_write_text(out / "results.csv", _format_csv(rows, RESULT_FIELDS))
    print(out / "results.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry points


def _configure_logging() -> None:
    level_name = os.environ.get("ARGON_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")


_DATA_ERRORS = (
    MelodyError,
    SmfParseError,
    AttributeValueError,
    ConfigError,
    ManifestError,
    OSError,
)
_NUMERIC_ERRORS = (
    FitError,
    DegenerateSampleError,
    TransformDomainError,
    MetricError,
    GradientCheckError,
    FloatingPointError,
)


def _extract_config_path(argv: list[str]) -> Path | None:
    for i, token in enumerate(argv):
        if token == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config expects a path")
            return Path(argv[i + 1])
        if token.startswith("--config="):
            return Path(token.split("=", 1)[1])
    return None


def _apply_config_defaults(parser: argparse.ArgumentParser, values: dict) -> None:
    """Install config-file values as defaults on every (sub)parser owning them.

    Subparsers parse into a fresh namespace, so defaults must be set on the
    owning parser itself; flags given on the command line still win.
    """
    known: set[str] = set()
    stack: list[argparse.ArgumentParser] = [parser]
    while stack:
        current = stack.pop()
        overlap = {}
        for action in current._actions:
            if isinstance(action, argparse._SubParsersAction):
                stack.extend(action.choices.values())
            elif action.dest != "help":
                known.add(action.dest)
                if action.dest in values:
                    overlap[action.dest] = values[action.dest]
                    action.required = False  # the config file satisfies it
        if overlap:
            current.set_defaults(**overlap)
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"config keys {sorted(unknown)} do not match any flag")


def run(argv: list[str]) -> int:
    """Dispatch one CLI invocation; returns the process exit code."""
    _configure_logging()
    parser = _build_parser()
    try:
        config_path = _extract_config_path(argv)
        if config_path is not None:
            if not config_path.exists():
                raise UsageError(f"config file not found: {config_path}")
            _apply_config_defaults(parser, _parse_config_file(config_path))
        args = parser.parse_args(argv)
        for dest in ("out", "corpus", "attributes", "transform", "checkpoint", "directory"):
            value = getattr(args, dest, None)
            if isinstance(value, str):  # config-file values arrive as strings
                setattr(args, dest, Path(value))
        handler = {
            "attributes": _cmd_attributes,
            "fit-transform": _cmd_fit_transform,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "export-plots": _cmd_export_plots,
            "replicate": _cmd_replicate,
        }.get(args.command)
        if args.command == "corpus":
            handler = {"synth": _cmd_corpus_synth, "ingest": _cmd_corpus_ingest}[
                args.corpus_command
            ]
        assert handler is not None
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
