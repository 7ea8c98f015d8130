"""Command-line entry points and the cross-validation harness.

Everything an experiment needs is named by one JSON config (dump the
defaults with `fuseseg config --dump-defaults`).  Commands are thin wrappers
over the library modules; each writes its outputs (volumes, models, tables,
plots, provenance) under an explicit output directory and reports failures
through exit codes: 0 success, 2 configuration error, 3 data error,
4 runtime failure.  The environment variable FUSESEG_SEED overrides the
configured global seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .errors import (
    FusesegError,
    InvalidConfig,
    IOFailure,
    NoRecords,
    TooFewCases,
    exit_code_for,
)
from .fusion import (
    PipelineModels,
    StreamKind,
    data_fingerprint,
    segment_case,
    train_pipeline,
)
from .metrics import (
    AggregateReport,
    MetricsRecord,
    aggregate,
    evaluate_case,
    report_lines,
    write_records_csv,
)
from .phantom import PhantomSpec, generate_dataset, load_spec, spec_from_dict
from .psnn import (
    DecoderDirection,
    PSNNConfig,
    TrainConfig,
    load_model,
    save_model,
)
from .register import RegParams, Similarity, register_case
from .volio import (
    CaseManifest,
    Interp,
    Mask,
    Modality,
    Volume,
    load_manifest,
    load_mask,
    load_volume,
    resample,
    resample_mask,
    save_manifest,
    save_mask,
    save_volume,
)

STREAM_ORDER = (StreamKind.CT, StreamKind.EF, StreamKind.LF)


# --------------------------------------------------------------------------
# experiment configuration

@dataclass
class ExperimentConfig:
    """One file that pins an entire experiment.

    The global `seed` governs phantom generation, fold assignment, and
    training (the harness overwrites the nested train seed per fold so that
    folds decorrelate deterministically).
    """

    phantom_spec: str | dict | None = None   # spec JSON path, inline spec fields, or None = built-in defaults
    n_cases: int = 20
    resample_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.5)
    window: tuple[int, int, int] = (80, 80, 64)
    stride: tuple[int, int, int] = (48, 48, 32)
    threshold: float = 0.5
    folds: int = 5
    seed: int = 0
    out_dir: str = "runs/experiment"
    patches_per_case: int = 16
    positive_fraction: float = 0.5
    lf_crossfit: bool = False       # train LF on held-out upstream maps
    lf_epochs: int | None = None    # epoch override for the LF stream only
    registration: RegParams = field(default_factory=RegParams)
    net: PSNNConfig = field(default_factory=PSNNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "ExperimentConfig":
        if self.folds < 2:
            raise InvalidConfig(f"folds must be >= 2, got {self.folds}")
        if self.n_cases < 1:
            raise InvalidConfig(f"n_cases must be >= 1, got {self.n_cases}")
        if not (0.0 <= self.threshold <= 1.0):
            raise InvalidConfig(f"threshold must be in [0,1], got {self.threshold}")
        if any(s <= 0 for s in self.resample_spacing_mm):
            raise InvalidConfig("resample_spacing_mm must be positive")
        if any(w < 1 for w in self.window) or any(s < 1 for s in self.stride):
            raise InvalidConfig("window and stride must be >= 1 per axis")
        if self.patches_per_case < 1:
            raise InvalidConfig("patches_per_case must be >= 1")
        if self.lf_epochs is not None and self.lf_epochs < 1:
            raise InvalidConfig(f"lf_epochs must be >= 1, got {self.lf_epochs}")
        if not (0.0 <= self.positive_fraction <= 1.0):
            raise InvalidConfig("positive_fraction must be in [0,1]")
        if isinstance(self.phantom_spec, dict):
            spec_from_dict(self.phantom_spec)
        elif self.phantom_spec is not None and not Path(self.phantom_spec).exists():
            raise InvalidConfig(f"phantom_spec path not found: {self.phantom_spec}")
        self.net.validate()
        self.train.validate()
        return self


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def _strict_kwargs(cls, data: dict, context: str) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidConfig(f"unknown {context} fields: {', '.join(unknown)}")
    return data


def _tup(value):
    return tuple(value) if isinstance(value, (list, tuple)) else value


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise InvalidConfig("config root must be a JSON object")
    data = dict(data)
    reg_d = data.pop("registration", None)
    net_d = data.pop("net", None)
    train_d = data.pop("train", None)
    _strict_kwargs(ExperimentConfig, data, "config")

    for key in ("resample_spacing_mm", "window", "stride"):
        if key in data:
            data[key] = _tup(data[key])

    kwargs = dict(data)
    if reg_d is not None:
        reg_d = _strict_kwargs(RegParams, dict(reg_d), "registration")
        for key in ("downsample_factors", "control_spacings_mm", "steps_per_level"):
            if key in reg_d:
                reg_d[key] = _tup(reg_d[key])
        if "similarity" in reg_d:
            reg_d["similarity"] = Similarity(reg_d["similarity"])
        kwargs["registration"] = RegParams(**reg_d)
    if net_d is not None:
        net_d = _strict_kwargs(PSNNConfig, dict(net_d), "net")
        for key in ("convs_per_block", "channels_per_block"):
            if key in net_d:
                net_d[key] = _tup(net_d[key])
        if "decoder_direction" in net_d:
            net_d["decoder_direction"] = DecoderDirection(net_d["decoder_direction"])
        kwargs["net"] = PSNNConfig(**net_d)
    if train_d is not None:
        train_d = _strict_kwargs(TrainConfig, dict(train_d), "train")
        if "patch_size" in train_d:
            train_d["patch_size"] = _tup(train_d["patch_size"])
        kwargs["train"] = TrainConfig(**train_d)
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"bad config value: {exc}") from exc


def dump_defaults() -> str:
    return json.dumps(config_to_dict(ExperimentConfig()), indent=2)


def desk_scale_config(out_dir, seed: int = 0) -> ExperimentConfig:
    """A complete five-fold experiment sized for one CPU core (~30-40 min).

    Twenty default phantoms at native spacing, the production window halved
    to 48x48x32, six epochs at learning rate 1e-2 (the high-momentum
    optimizer needs the larger rate inside this step budget).  Every stage
    of the full protocol is exercised — registration, three chained
    streams, per-fold isolation, tables and plots — just on less data.
    """
    return ExperimentConfig(
        n_cases=20,
        window=(48, 48, 32),
        stride=(32, 32, 16),
        folds=5,
        seed=seed,
        out_dir=str(out_dir),
        patches_per_case=16,
        train=TrainConfig(
            learning_rate=1e-2,
            epochs=6,
            batch_size=4,
            patch_size=(48, 48, 32),
            seed=seed,
        ),
    )


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise InvalidConfig(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data).validate()


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def env_seed(default: int) -> int:
    """FUSESEG_SEED environment override, else the given default."""
    raw = os.environ.get("FUSESEG_SEED")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise InvalidConfig(f"FUSESEG_SEED must be an integer, got {raw!r}") from exc


# --------------------------------------------------------------------------
# fold assignment

def make_folds(case_ids: Sequence[str], k: int, seed: int) -> dict[str, int]:
    """Seeded shuffle then round-robin: fold sizes differ by at most one,
    and the split is by case, never by patch."""
    ids = list(case_ids)
    if k < 2:
        raise InvalidConfig(f"need at least 2 folds, got {k}")
    if len(set(ids)) != len(ids):
        raise InvalidConfig("duplicate case ids")
    if len(ids) < k:
        raise TooFewCases(f"{len(ids)} cases cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[int(j)]: i % k for i, j in enumerate(order)}


# --------------------------------------------------------------------------
# dataset plumbing shared by commands

def generate_phantoms(spec_source, n_cases: int, seed: int, out_dir) -> Path:
    """spec_source: a spec JSON path, an inline field dict, or None for defaults."""
    if spec_source is None:
        spec = PhantomSpec()
    elif isinstance(spec_source, dict):
        spec = spec_from_dict(spec_source)
    else:
        spec = load_spec(spec_source)
    return generate_dataset(spec, n_cases, seed, out_dir)


def ensure_spacing(cases: Sequence[CaseManifest], spacing, out_dir) -> list[CaseManifest]:
    """Resample any case whose grids are not at the target spacing.

    Intensity volumes are interpolated trilinearly, the mask nearest-
    neighbour.  Cases already on target pass through untouched.
    """
    target = tuple(float(s) for s in spacing)
    out = []
    for case in cases:
        vol = load_volume(case.rtct)
        if all(abs(vol.spacing[a] - target[a]) < 1e-9 for a in range(3)):
            out.append(case)
            continue
        cdir = Path(out_dir) / case.case_id
        new = dataclasses.replace(case)
        for attr in ("rtct", "diag_ct", "pet"):
            v = load_volume(getattr(case, attr))
            save_volume(resample(v, target), cdir / attr)
            setattr(new, attr, str(cdir / attr))
        save_mask(resample_mask(load_mask(case.gtv_mask), target), cdir / "gtv")
        new.gtv_mask = str(cdir / "gtv")
        new.pet_reg = None          # spacing changed; registration must rerun
        new.true_field = None       # field sampling is tied to the old grid
        out.append(new)
    return out


def register_all(
    cases: Sequence[CaseManifest],
    params: RegParams,
    force: bool = False,
    log=None,
) -> list[CaseManifest]:
    """Register every case lacking a usable PET; idempotent unless forced."""
    for case in cases:
        have = case.pet_reg and Path(str(case.pet_reg) + ".raw").exists()
        if have and not force:
            continue
        if log:
            log(f"registering {case.case_id}")
        out_path = Path(case.rtct).parent / "pet_reg"
        register_case(case, params, out_path)
    return list(cases)


MODEL_NAMES = {StreamKind.CT: "model_ct", StreamKind.EF: "model_ef",
               StreamKind.LF: "model_lf"}


def save_pipeline(models: PipelineModels, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for kind in STREAM_ORDER:
        save_model(models.model_for(kind), out / MODEL_NAMES[kind])
    (out / "provenance.json").write_text(json.dumps(models.provenance, indent=1))


def load_pipeline(models_dir) -> PipelineModels:
    d = Path(models_dir)
    if not d.exists():
        raise InvalidConfig(f"models directory not found: {d}")
    provenance = {}
    prov_path = d / "provenance.json"
    if prov_path.exists():
        provenance = json.loads(prov_path.read_text())
    return PipelineModels(
        load_model(d / MODEL_NAMES[StreamKind.CT]),
        load_model(d / MODEL_NAMES[StreamKind.EF]),
        load_model(d / MODEL_NAMES[StreamKind.LF]),
        provenance,
    ).validate()


def _versions() -> dict:
    import scipy
    import torch

    return {
        "fuseseg": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


# --------------------------------------------------------------------------
# cross-validation harness

@dataclass
class CVResult:
    reports: list[AggregateReport]
    records: dict[str, list[MetricsRecord]]
    fold_map: dict[str, int]
    table_path: Path
    out_dir: Path

    def mean_dsc(self, stream: str) -> float:
        for rep in self.reports:
            if rep.stream == stream:
                return rep.mean_std("dsc")[0]
        raise KeyError(stream)


def _stream_label(kind: StreamKind, direction: DecoderDirection,
                  ablate: bool) -> str:
    if not ablate:
        return kind.value
    return f"{kind.value}[{direction.value.lower()}]"


def run_cv(cfg: ExperimentConfig, ablate_decoder: bool = False, log=None) -> CVResult:
    """The full protocol: phantoms -> registration -> k-fold train/test ->
    tables and plots.  Deterministic given config + seed; rerunning over an
    existing output directory reuses the generated cases and registrations.
    """
    cfg.validate()
    log = log or (lambda msg: None)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    cases_dir = out / "cases"
    manifest_path = cases_dir / "manifest.json"
    if not manifest_path.exists():
        log(f"generating {cfg.n_cases} phantom cases")
        generate_phantoms(cfg.phantom_spec, cfg.n_cases, cfg.seed, cases_dir)
    cases = load_manifest(manifest_path)
    if len(cases) != cfg.n_cases:
        raise InvalidConfig(
            f"manifest holds {len(cases)} cases but config expects {cfg.n_cases}; "
            f"use a fresh out_dir"
        )
    cases = ensure_spacing(cases, cfg.resample_spacing_mm, out / "resampled")
    register_all(cases, cfg.registration, log=log)
    save_manifest(cases, manifest_path)

    fold_map = make_folds([c.case_id for c in cases], cfg.folds, cfg.seed)
    directions = [cfg.net.decoder_direction]
    if ablate_decoder:
        directions.append(
            DecoderDirection.LOW_TO_HIGH
            if cfg.net.decoder_direction == DecoderDirection.HIGH_TO_LOW
            else DecoderDirection.HIGH_TO_LOW
        )

    records: dict[str, list[MetricsRecord]] = {}
    fold_digests: dict[str, dict] = {}
    for direction in directions:
        net = dataclasses.replace(cfg.net, decoder_direction=direction)
        for fold in range(cfg.folds):
            train_cases = [c for c in cases if fold_map[c.case_id] != fold]
            test_cases = [c for c in cases if fold_map[c.case_id] == fold]
            tc = dataclasses.replace(cfg.train, seed=cfg.seed * 1000 + fold)
            log(f"[{direction.value}] fold {fold}: training on {len(train_cases)} cases")
            models = train_pipeline(
                train_cases, net, tc,
                patches_per_case=cfg.patches_per_case,
                positive_fraction=cfg.positive_fraction,
                window=cfg.window, stride=cfg.stride,
                batch_size=cfg.train.batch_size,
                lf_crossfit=cfg.lf_crossfit,
                lf_epochs=cfg.lf_epochs,
            )
            tag = f"fold_{fold}" if not ablate_decoder else \
                f"{direction.value.lower()}_fold_{fold}"
            save_pipeline(models, out / "models" / tag)
            fold_digests[tag] = models.provenance["streams"]
            for case in test_cases:
                log(f"[{direction.value}] fold {fold}: segmenting {case.case_id}")
                res = segment_case(
                    models, case, cfg.threshold, cfg.window, cfg.stride,
                    cfg.train.ct_clip_hu, cfg.train.batch_size,
                )
                gt = load_mask(case.gtv_mask)
                for kind in STREAM_ORDER:
                    pred = Mask(res.prob_for(kind) >= cfg.threshold,
                                gt.spacing, gt.origin)
                    label = _stream_label(kind, direction, ablate_decoder)
                    records.setdefault(label, []).append(
                        evaluate_case(pred, gt, case.case_id)
                    )

    reports = [
        aggregate(recs, fold_map, stream=label) for label, recs in records.items()
    ]
    tables_dir = out / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    for label, recs in records.items():
        write_records_csv(recs, tables_dir / f"records_{label}.csv",
                          stream=label, fold_map=fold_map)
    table_path = tables_dir / "report.txt"
    table_path.write_text("\n".join(report_lines(reports, header="cross-validation")) + "\n")

    emit_plots(records, out / "plots")
    provenance = {
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "ablate_decoder": ablate_decoder,
        "fold_map": fold_map,
        "cases": [c.case_id for c in cases],
        "data_hash": data_fingerprint(cases),
        "model_configs": fold_digests,
        "versions": _versions(),
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=1))
    log(f"report written to {table_path}")
    return CVResult(reports, records, fold_map, table_path, out)


# --------------------------------------------------------------------------
# plots

def emit_plots(records_by_stream: Mapping[str, Sequence[MetricsRecord]], out_dir) -> list[Path]:
    """Box plot of DSC per stream and a grouped per-case DSC bar chart."""
    streams = [s for s, recs in records_by_stream.items() if recs]
    if not streams:
        raise NoRecords("no records to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)

        fig, ax = plt.subplots(figsize=(6, 4))
        data = [[r.dsc for r in records_by_stream[s]] for s in streams]
        ax.boxplot(data)
        ax.set_xticks(range(1, len(streams) + 1))
        ax.set_xticklabels(streams)
        for i, vals in enumerate(data):
            ax.plot([i + 1] * len(vals), vals, "k.", alpha=0.5)
        ax.set_ylabel("DSC")
        ax.set_ylim(0, 1)
        ax.set_title("per-stream DSC")
        fig.tight_layout()
        box_path = out / "dsc_by_stream.png"
        fig.savefig(box_path, dpi=100)
        plt.close(fig)

        case_ids = sorted({r.case_id for s in streams for r in records_by_stream[s]})
        fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(case_ids)), 4))
        width = 0.8 / len(streams)
        xs = np.arange(len(case_ids))
        for i, s in enumerate(streams):
            by_case = {r.case_id: r.dsc for r in records_by_stream[s]}
            ax.bar(xs + i * width, [by_case.get(c, 0.0) for c in case_ids],
                   width, label=s)
        ax.set_xticks(xs + 0.4 - width / 2)
        ax.set_xticklabels(case_ids, rotation=90, fontsize=7)
        ax.set_ylabel("DSC")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        bar_path = out / "dsc_per_case.png"
        fig.savefig(bar_path, dpi=100)
        plt.close(fig)
    except OSError as exc:
        raise IOFailure(f"cannot write plots under {out}: {exc}") from exc
    return [box_path, bar_path]


def read_records_csv(path) -> tuple[str, list[MetricsRecord], dict[str, int]]:
    """Inverse of write_records_csv; returns (stream, records, fold_map)."""
    p = Path(path)
    if not p.exists():
        raise InvalidConfig(f"records file not found: {p}")
    records, fold_map, stream = [], {}, ""
    with open(p, newline="") as f:
        for row in csv.DictReader(f):
            stream = row["stream"] or stream
            if row["fold"] != "":
                fold_map[row["case_id"]] = int(row["fold"])
            records.append(MetricsRecord(
                case_id=row["case_id"],
                dsc=float(row["dsc"]),
                hd_mm=float(row["hd_mm"]) if row["hd_mm"] else None,
                asd_mm=float(row["asd_mm"]) if row["asd_mm"] else None,
                empty_prediction=bool(int(row["empty_prediction"])),
                empty_ground_truth=bool(int(row["empty_ground_truth"])),
            ))
    return stream, records, fold_map


# --------------------------------------------------------------------------
# commands

def cmd_config(args) -> int:
    if args.dump_defaults:
        text = dump_defaults()
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text + "\n")
        else:
            print(text)
        return 0
    if args.check:
        load_config(args.check)
        print(f"{args.check}: valid")
        return 0
    raise InvalidConfig("config: pass --dump-defaults or --check PATH")


def cmd_phantom(args) -> int:
    seed = env_seed(args.seed)
    manifest = generate_phantoms(args.spec, args.cases, seed, args.out)
    print(manifest)
    return 0


def _load_cases(manifest_path) -> list[CaseManifest]:
    p = Path(manifest_path)
    if not p.exists():
        raise InvalidConfig(f"manifest not found: {p}")
    return load_manifest(p)


def cmd_register(args) -> int:
    cases = _load_cases(args.manifest)
    params = load_config(args.config).registration if args.config else RegParams()
    register_all(cases, params, force=args.force, log=_log)
    save_manifest(cases, args.manifest)
    print(f"registered {len(cases)} cases")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = dataclasses.replace(cfg, seed=env_seed(cfg.seed))
    cases = _load_cases(args.manifest)
    tc = dataclasses.replace(cfg.train, seed=cfg.seed)
    models = train_pipeline(
        cases, cfg.net, tc,
        patches_per_case=cfg.patches_per_case,
        positive_fraction=cfg.positive_fraction,
        window=cfg.window, stride=cfg.stride, batch_size=cfg.train.batch_size,
        lf_crossfit=cfg.lf_crossfit,
        lf_epochs=cfg.lf_epochs,
    )
    out = Path(args.out)
    save_pipeline(models, out)
    print(f"models written to {out}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    models = load_pipeline(args.models)
    cases = {c.case_id: c for c in _load_cases(args.manifest)}
    if args.case not in cases:
        raise InvalidConfig(f"case {args.case!r} not in manifest")
    case = cases[args.case]
    res = segment_case(models, case, cfg.threshold, cfg.window, cfg.stride,
                       cfg.train.ct_clip_hu, cfg.train.batch_size)
    out = Path(args.out)
    for kind in STREAM_ORDER:
        vol = Volume(res.prob_for(kind), res.spacing, res.origin, Modality.PROB)
        save_volume(vol, out / f"{case.case_id}_prob_{kind.value.lower()}")
    save_mask(Mask(res.lf_mask, res.spacing, res.origin),
              out / f"{case.case_id}_mask_lf")
    print(f"wrote probability volumes and mask for {case.case_id} to {out}")
    return 0


def cmd_eval(args) -> int:
    pred = load_mask(args.pred)
    gt = load_mask(args.gt)
    rec = evaluate_case(pred, gt, case_id=args.case_id)
    hd = "undefined" if rec.hd_mm is None else f"{rec.hd_mm:.1f}"
    asd_s = "undefined" if rec.asd_mm is None else f"{rec.asd_mm:.1f}"
    print(f"case={rec.case_id or '-'} dsc={rec.dsc:.3f} hd_mm={hd} asd_mm={asd_s}")
    return 0


def cmd_cv(args) -> int:
    cfg = load_config(args.config)
    cfg = dataclasses.replace(cfg, seed=env_seed(cfg.seed))
    result = run_cv(cfg, ablate_decoder=args.ablate_decoder, log=_log)
    print(result.table_path.read_text(), end="")
    return 0


def cmd_report(args) -> int:
    records_by_stream: dict[str, list[MetricsRecord]] = {}
    fold_map: dict[str, int] = {}
    for path in args.records:
        stream, records, folds = read_records_csv(path)
        records_by_stream.setdefault(stream or Path(path).stem, []).extend(records)
        fold_map.update(folds)
    if not any(records_by_stream.values()):
        raise NoRecords("records files contain no rows")
    reports = [
        aggregate(recs, fold_map or None, stream=s)
        for s, recs in records_by_stream.items()
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = "\n".join(report_lines(reports, header="re-aggregated report")) + "\n"
    (out / "report.txt").write_text(text)
    emit_plots(records_by_stream, out / "plots")
    print(text, end="")
    return 0


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fuseseg",
        description="Two-stream chained PET/CT fusion segmentation toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="dump or check experiment configs")
    c.add_argument("--dump-defaults", action="store_true")
    c.add_argument("--check", metavar="PATH")
    c.add_argument("--out", metavar="PATH")
    c.set_defaults(fn=cmd_config)

    c = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    c.add_argument("--spec", metavar="PATH", default=None)
    c.add_argument("--cases", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_phantom)

    c = sub.add_parser("register", help="register every case in a manifest")
    c.add_argument("--manifest", required=True)
    c.add_argument("--config", default=None)
    c.add_argument("--force", action="store_true")
    c.set_defaults(fn=cmd_register)

    c = sub.add_parser("train", help="train the three-stream pipeline")
    c.add_argument("--manifest", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_train)

    c = sub.add_parser("infer", help="segment one case with trained models")
    c.add_argument("--models", required=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--case", required=True)
    c.add_argument("--config", default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_infer)

    c = sub.add_parser("eval", help="compare a predicted mask to ground truth")
    c.add_argument("--pred", required=True)
    c.add_argument("--gt", required=True)
    c.add_argument("--case-id", default="")
    c.set_defaults(fn=cmd_eval)

    c = sub.add_parser("cv", help="full cross-validation experiment")
    c.add_argument("--config", required=True)
    c.add_argument("--ablate-decoder", action="store_true")
    c.set_defaults(fn=cmd_cv)

    c = sub.add_parser("report", help="re-aggregate records CSVs into a report")
    c.add_argument("--records", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_report)

    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FusesegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
