"""`ecgfuse` command line: ingest -> spectrogram -> encode -> train ->
evaluate / predict / sweep.

Every artifact embeds the hash of the config subset that produced it;
consumers reject artifacts whose hash does not match their own config
(StaleCache). Exit codes: 0 success, 1 validation/data errors, 2 config
errors (including stale caches and unknown subcommands).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dsp, encoder, evaluation, fusion, model
from .cache import FeatureStore, StaleCache
from .config import DspConfig, IngestConfig, PipelineConfig
from .ingest import (
    DiagnosisLabel,
    IngestError,
    LEAD_ORDER,
    canonicalize,
    class_index,
    parse_record,
    task_classes,
    validate_record,
)

__all__ = ["main", "run_subcommand"]

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse, validate, and index a record directory")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "wfdb"], default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=int, default=None)
    p.add_argument("--seconds", type=float, default=None)
    p.add_argument("--flatline-eps", type=float, default=None)
    p.add_argument("--range-limit", type=float, default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("spectrogram", help="export spectrogram arrays (and PNGs)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-s", type=float, default=None)
    p.add_argument("--overlap", type=float, default=None)
    p.add_argument("--chunk-s", type=float, default=None)
    p.add_argument("--chunk-overlap", type=float, default=None)
    p.add_argument("--export-png", action="store_true")
    p.add_argument("--config", default=None)

    p = sub.add_parser("encode", help="embed spectrograms into the feature cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backend", default=None, help="fallback:<tau>:<seed> or onnx:<path>:<kind>")
    p.add_argument("--fusion-input", choices=["per-lead", "stacked"], default=None)
    p.add_argument("--cache", default=None)
    p.add_argument("--config", default=None)

    p = sub.add_parser("train", help="cross-validate and fit a final checkpoint")
    p.add_argument("--cache", default=None)
    p.add_argument("--fusion", choices=list(fusion.FUSION_STRATEGIES), default=None)
    p.add_argument("--model", choices=list(model.MODES), default=None)
    p.add_argument("--task", choices=["binary", "onset"], default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None, help="CV metrics JSON (default: <out>.cv.json)")
    p.add_argument("--config", default=None)

    p = sub.add_parser("evaluate", help="score a checkpoint against a feature cache")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--report", required=True)

    p = sub.add_parser("predict", help="classify one record file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--record", required=True)
    p.add_argument("--format", choices=["csv", "wfdb"], default=None)

    p = sub.add_parser("sweep", help="run a fusion x model comparison grid")
    p.add_argument("--grid", required=True, help="JSON: {base: config, fusions: [...], models: [...]}")
    p.add_argument("--cache", default=None)
    p.add_argument("--out", required=True, help="output prefix for .csv and .txt tables")
    return parser


_UPSTREAM_SECTIONS = ("ingest", "dsp", "backend", "fusion_input")

_FLAG_MAP = {
    "format": ("ingest", "format"),
    "rate": ("ingest", "rate"),
    "seconds": ("ingest", "seconds"),
    "flatline_eps": ("ingest", "flatline_eps"),
    "range_limit": ("ingest", "range_limit"),
    "window_s": ("dsp", "window_s"),
    "overlap": ("dsp", "overlap"),
    "chunk_s": ("dsp", "chunk_s"),
    "chunk_overlap": ("dsp", "chunk_overlap"),
    "backend": (None, "backend"),
    "fusion_input": (None, "fusion_input"),
    "fusion": ("train", "fusion"),
    "model": ("train", "model"),
    "task": ("train", "task"),
    "folds": ("train", "folds"),
    "seed": ("train", "seed"),
    "epochs": ("train", "epochs"),
}


def _load_config(args) -> tuple[PipelineConfig, set[str]]:
    """Build the config from --config plus flags.

    Returns the config and the set of upstream sections (ingest/dsp/backend/
    fusion_input) the user pinned explicitly, so cache consumers know which
    parts may be adopted from an existing cache.
    """
    cfg = PipelineConfig()
    pinned: set[str] = set()
    path = getattr(args, "config", None)
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            cfg = PipelineConfig.from_dict(data)
        except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad --config {path}: {exc}") from exc
        pinned |= set(data) & set(_UPSTREAM_SECTIONS)
    for attr, (section, name) in _FLAG_MAP.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if section is None:
            setattr(cfg, name, value)
            pinned.add(name)
        else:
            setattr(getattr(cfg, section), name, value)
            if section in ("ingest", "dsp"):
                pinned.add(section)
    return cfg, pinned


def _adopt_cache_upstream(cfg: PipelineConfig, pinned: set[str], store: FeatureStore) -> PipelineConfig:
    """Fill unpinned upstream sections from the cache, then require agreement.

    A cache built under different settings than the (explicitly) requested
    ones is stale; sections the user left unspecified follow the cache.
    """
    upstream = store.upstream or {}
    merged = cfg.to_dict()
    for section in _UPSTREAM_SECTIONS:
        if section not in pinned and section in upstream:
            merged[section] = upstream[section]
    cfg = PipelineConfig.from_dict(merged)
    if cfg.stage_hash("encode") != store.stage_hash:
        raise StaleCache(
            f"cache {store.directory} was built under config {store.stage_hash!r}; "
            f"requested settings hash to {cfg.stage_hash('encode')!r}"
        )
    return cfg


def _cache_dir(args) -> Path:
    if getattr(args, "cache", None):
        return Path(args.cache)
    env = os.environ.get("ECGFUSE_CACHE")
    if env:
        return Path(env)
    raise ConfigError("no cache directory: pass --cache or set ECGFUSE_CACHE")


def _record_paths(directory: Path, fmt: str) -> list[Path]:
    pattern = "*.csv" if fmt == "csv" else "*.hea"
    return sorted(p for p in directory.glob(pattern) if not p.name.endswith(".meta.json"))


def _cmd_ingest(args) -> int:
    cfg, _ = _load_config(args)
    directory = Path(args.input)
    if not directory.is_dir():
        raise ConfigError(f"--input {directory} is not a directory")
    fmt = cfg.ingest.format
    entries = []
    n_accepted = 0
    for path in _record_paths(directory, fmt):
        entry: dict = {"path": str(path.resolve()), "format": fmt}
        try:
            rec = parse_record(path, fmt)
            rec = canonicalize(rec, cfg.ingest.rate, cfg.ingest.seconds)
            report = validate_record(rec, cfg.ingest.flatline_eps, cfg.ingest.range_limit)
            entry.update(
                record_id=rec.record_id,
                label=rec.label.value if rec.label else None,
                sampling_rate=rec.sampling_rate,
                n_samples=rec.n_samples,
                accepted=report.accepted,
                flagged_leads={
                    lead.value: vars(report.flags[lead])
                    for lead in LEAD_ORDER
                    if report.flags[lead].any
                },
            )
            n_accepted += report.accepted
        except IngestError as exc:
            entry.update(accepted=False, error=f"{type(exc).__name__}: {exc}")
        entries.append(entry)
    manifest = {
        "stage_hash": cfg.stage_hash("ingest"),
        "config_hash": cfg.config_hash,
        "ingest": asdict(cfg.ingest),
        "records": entries,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    print(f"ingested {len(entries)} files, {n_accepted} accepted -> {out}")
    return EXIT_OK if n_accepted else EXIT_VALIDATION


def _load_manifest(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc


def _manifest_records(manifest: dict, ingest_cfg: IngestConfig):
    for entry in manifest["records"]:
        if not entry.get("accepted"):
            continue
        rec = parse_record(entry["path"], entry["format"])
        yield canonicalize(rec, ingest_cfg.rate, ingest_cfg.seconds)


def _record_specs(rec, d: DspConfig):
    return dsp.record_spectrograms(
        rec,
        window_s=d.window_s,
        overlap=d.overlap,
        chunk_s=d.chunk_s,
        chunk_overlap=d.chunk_overlap,
        hp_cutoff=d.hp_cutoff,
        gauss_sigma=d.gauss_sigma,
        floor_eps=d.floor_eps,
    )


def _cmd_spectrogram(args) -> int:
    cfg, _ = _load_config(args)
    manifest = _load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for rec in _manifest_records(manifest, cfg.ingest):
        specs = _record_specs(rec, cfg.dsp)
        stack = np.stack([[s.values for s in specs[lead]] for lead in LEAD_ORDER])
        np.savez_compressed(out / f"{rec.record_id}.npz", spectrograms=stack)
        if args.export_png:
            for lead in LEAD_ORDER:
                lead_dir = out / rec.record_id / lead.value
                lead_dir.mkdir(parents=True, exist_ok=True)
                for n, spec in enumerate(specs[lead]):
                    img = dsp.render_image(spec, cfg.dsp.colormap)
                    dsp.export_png(img, lead_dir / f"{n}.png")
        count += 1
    meta = {"stage_hash": cfg.stage_hash("dsp"), "config_hash": cfg.config_hash, "dsp": asdict(cfg.dsp)}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    print(f"wrote spectrograms for {count} records -> {out}")
    return EXIT_OK if count else EXIT_VALIDATION


def _cmd_encode(args) -> int:
    cfg, _ = _load_config(args)
    manifest = _load_manifest(args.manifest)
    cache_dir = _cache_dir(args)
    backend = encoder.backend_from_spec(cfg.backend, cfg.dsp.colormap)
    stage = cfg.stage_hash("encode")
    meta_path = cache_dir / FeatureStore.META_NAME
    if meta_path.exists():
        existing = json.loads(meta_path.read_text(encoding="utf-8"))
        if existing.get("stage_hash") != stage:
            raise StaleCache(
                f"cache {cache_dir} was built under config {existing.get('stage_hash')!r}; "
                f"this config hashes to {stage!r}"
            )
    store: FeatureStore | None = None
    count = 0
    for rec in _manifest_records(manifest, cfg.ingest):
        specs = _record_specs(rec, cfg.dsp)
        feats = encoder.encode_record(backend, specs, cfg.fusion_input)
        if store is None:
            upstream = {k: cfg.to_dict()[k] for k in _UPSTREAM_SECTIONS}
            store = FeatureStore.create(
                cache_dir, stage, backend.backend_id, backend.tau, feats.shape[1],
                cfg.fusion_input, upstream=upstream,
            )
        store.put(rec.record_id, feats, rec.label.value if rec.label else None)
        count += 1
    if store is None:
        print("no accepted records to encode", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"encoded {count} records -> {cache_dir} (tau={backend.tau}, gamma={store.gamma})")
    return EXIT_OK


def _labels_for_task(store: FeatureStore, task: str) -> dict[str, int]:
    out = {}
    for rid, name in store.labels.items():
        out[rid] = class_index(DiagnosisLabel(name), task)
    return out


def _experiment_config(cfg: PipelineConfig) -> dict:
    t = cfg.train
    return {
        "fusion": t.fusion,
        "model": t.model,
        "n_classes": len(task_classes(t.task)),
        "folds": t.folds,
        "seed": t.seed,
        "lr": t.lr,
        "batch_size": t.batch_size,
        "epochs": t.epochs,
        "patience": t.patience,
        "val_fraction": t.val_fraction,
        "kappa": t.kappa,
        "nu": t.nu,
        "config_hash": cfg.config_hash,
    }


def _cmd_train(args) -> int:
    cfg, pinned = _load_config(args)
    cache_dir = _cache_dir(args)
    store = FeatureStore.load(cache_dir)
    cfg = _adopt_cache_upstream(cfg, pinned, store)
    labels = _labels_for_task(store, cfg.train.task)
    if not labels:
        print("cache has no labelled records", file=sys.stderr)
        return EXIT_VALIDATION
    exp_cfg = _experiment_config(cfg)
    report = evaluation.run_experiment(store, labels, exp_cfg)
    report_path = Path(args.report) if args.report else Path(str(args.out) + ".cv.json")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")

    # Final model fit on all labelled records (stratified early-stop split).
    models = _fit_final_models(store, labels, cfg)
    model.save_checkpoint(
        Path(args.out),
        models,
        seed=cfg.train.seed,
        config=cfg.to_dict(),
        config_hash=cfg.config_hash,
        extra={"encode_stage_hash": cfg.stage_hash("encode"), "task": cfg.train.task},
    )
    agg = report["aggregate"]
    print(
        f"cv macro AUROC {agg['auroc_macro']:.4f}, accuracy {agg['accuracy']:.4f}; "
        f"checkpoint -> {args.out}, report -> {report_path}"
    )
    return EXIT_OK


def _fit_final_models(store: FeatureStore, labels: dict[str, int], cfg: PipelineConfig):
    t = cfg.train
    n_classes = len(task_classes(t.task))
    settings = evaluation.TrainSettings(
        lr=t.lr, batch_size=t.batch_size, epochs=t.epochs, patience=t.patience,
        val_fraction=t.val_fraction,
    )
    ids = [rid for rid in store.record_ids() if rid in labels]
    lab = {rid: labels[rid] for rid in ids}
    train_ids, val_ids = evaluation.carve_validation(ids, lab, t.val_fraction, t.seed + 104729)
    y_train = np.asarray([lab[r] for r in train_ids], dtype=np.intp)
    y_val = np.asarray([lab[r] for r in val_ids], dtype=np.intp)
    decision = t.fusion in ("decision_accum", "decision_vote")
    d_in = store.tau if decision or t.fusion in ("data", "feature_accum") else store.tau * store.n_leads
    dims = model.ModelDims(mode=t.model, tau_in=d_in, n_classes=n_classes, kappa=t.kappa, nu=t.nu)
    if not decision:
        x_train = np.stack([evaluation.fuse_features(store.get(r), t.fusion) for r in train_ids])
        x_val = (
            np.stack([evaluation.fuse_features(store.get(r), t.fusion) for r in val_ids])
            if val_ids
            else None
        )
        params, state, _ = evaluation.train_model(x_train, y_train, dims, t.seed, settings, x_val, y_val)
        return [(params, state)]
    models = []
    for j in range(store.n_leads):
        xj = np.stack([store.get(r)[j].astype(np.float64) for r in train_ids])
        xj_val = (
            np.stack([store.get(r)[j].astype(np.float64) for r in val_ids]) if val_ids else None
        )
        params, state, _ = evaluation.train_model(xj, y_train, dims, t.seed + j, settings, xj_val, y_val)
        models.append((params, state))
    return models


def _checkpoint_scores(ckpt: dict, arr: np.ndarray, fusion_strategy: str) -> np.ndarray:
    models = ckpt["models"]
    if len(models) == 1:
        x = evaluation.fuse_features(arr, fusion_strategy)
        return model.sequence_probs(x[None], models[0][0])[0]
    return evaluation.decision_scores([p for p, _ in models], arr, fusion_strategy)


def _cmd_evaluate(args) -> int:
    ckpt = model.load_checkpoint(args.ckpt)
    cfg = PipelineConfig.from_dict(ckpt["header"]["config"])
    cache_dir = _cache_dir(args)
    store = FeatureStore.load(cache_dir, expect_stage_hash=cfg.stage_hash("encode"))
    task = ckpt["header"]["extra"]["task"]
    labels = _labels_for_task(store, task)
    if not labels:
        print("cache has no labelled records", file=sys.stderr)
        return EXIT_VALIDATION
    ids = sorted(labels)
    strategy = cfg.train.fusion
    scores = np.stack([_checkpoint_scores(ckpt, store.get(r), strategy) for r in ids])
    truth = np.asarray([labels[r] for r in ids], dtype=np.intp)
    n_classes = len(task_classes(task))
    report = evaluation.classification_metrics(np.argmax(scores, axis=1), truth, n_classes)
    try:
        report.auroc_per_class = evaluation.auroc_one_vs_all(scores, truth, n_classes)
        report.auroc_macro = float(np.mean(report.auroc_per_class))
    except evaluation.DegenerateLabels:
        pass
    payload = {
        "config_hash": cfg.config_hash,
        "task": task,
        "n_records": len(ids),
        "metrics": report.to_dict(),
    }
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    print(f"evaluated {len(ids)} records -> {args.report}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    ckpt = model.load_checkpoint(args.ckpt)
    cfg = PipelineConfig.from_dict(ckpt["header"]["config"])
    fmt = args.format or cfg.ingest.format
    rec = parse_record(args.record, fmt)
    rec = canonicalize(rec, cfg.ingest.rate, cfg.ingest.seconds)
    backend = encoder.backend_from_spec(cfg.backend, cfg.dsp.colormap)
    specs = _record_specs(rec, cfg.dsp)
    feats = encoder.encode_record(backend, specs, cfg.fusion_input)
    scores = _checkpoint_scores(ckpt, feats, cfg.train.fusion)
    task = ckpt["header"]["extra"]["task"]
    classes = task_classes(task)
    result = {
        "record_id": rec.record_id,
        "label": classes[int(np.argmax(scores))],
        "probs": {name: float(p) for name, p in zip(classes, scores)},
    }
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid {args.grid}: {exc}") from exc
    base_dict = grid.get("base", {})
    base = PipelineConfig.from_dict(base_dict)
    fusions = grid.get("fusions", list(fusion.FUSION_STRATEGIES))
    models = grid.get("models", list(model.MODES))
    cache_dir = _cache_dir(args)
    store = FeatureStore.load(cache_dir)
    base = _adopt_cache_upstream(base, set(base_dict) & set(_UPSTREAM_SECTIONS), store)
    labels = _labels_for_task(store, base.train.task)
    classes = task_classes(base.train.task)
    rows = []
    for fus in fusions:
        for mode in models:
            base.train.fusion = fus
            base.train.model = mode
            exp_cfg = _experiment_config(base)
            report = evaluation.run_experiment(store, labels, exp_cfg)
            agg = report["aggregate"]
            rows.append(
                {
                    "method": f"{fus}+{mode}",
                    **{f"auroc_{name}": agg["auroc_per_class"][i] for i, name in enumerate(classes)},
                    "auroc_macro": agg["auroc_macro"],
                    "accuracy": agg["accuracy"],
                }
            )
    header = list(rows[0].keys())
    csv_lines = [",".join(header)]
    for row in rows:
        csv_lines.append(",".join(f"{row[h]:.4f}" if isinstance(row[h], float) else str(row[h]) for h in header))
    Path(str(args.out) + ".csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    widths = [max(len(str(r[h])) for r in rows + [dict(zip(header, header))]) for h in header]
    txt_lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for row in rows:
        txt_lines.append(
            "  ".join(
                (f"{row[h]:.4f}" if isinstance(row[h], float) else str(row[h])).ljust(w)
                for h, w in zip(header, widths)
            )
        )
    Path(str(args.out) + ".txt").write_text("\n".join(txt_lines) + "\n", encoding="utf-8")
    print(f"swept {len(rows)} methods -> {args.out}.csv / {args.out}.txt")
    return EXIT_OK


_COMMANDS = {
    "ingest": _cmd_ingest,
    "spectrogram": _cmd_spectrogram,
    "encode": _cmd_encode,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
    "sweep": _cmd_sweep,
}


def run_subcommand(argv: list[str]) -> int:
    """Parse argv (without the program name) and run one pipeline stage."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except (
        ConfigError,
        StaleCache,
        evaluation.ConfigInvalid,
        encoder.BackendLoadFailure,
        ValueError,
    ) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, encoder.EncoderError, evaluation.EvalError, model.ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run_subcommand(sys.argv[1:]))
