#!/usr/bin/env python3
"""Public-data check: binary MI-vs-healthy on PTB-style WFDB records.

Expects a directory of 12-lead format-16 WFDB records (first 10 s used,
resampled to 500 Hz) plus a labels.json mapping record stem -> label name
("acute"/"recent"/"old" count as MI, "normal"/"healthy" as the negative
class), and a pretrained MnasNet-class ONNX feature extractor. Runs
data-fusion (stacked spectrogram) encoding and a Dense-LSTM head under
10-fold cross-validation, reporting binary AUROC.

Neither the dataset nor pretrained weights ship with this repository; fetch
PTB from PhysioNet and export a backbone with scripts/export_backbone_onnx.py
in an environment that has torch + onnx installed.
"""

import argparse
import json
from pathlib import Path

from ecgfuse import dsp, encoder
from ecgfuse.cache import FeatureStore
from ecgfuse.evaluation import run_experiment
from ecgfuse.ingest import canonicalize, parse_record, validate_record


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--data", required=True, help="directory of .hea/.dat records + labels.json")
    parser.add_argument("--backbone", required=True, help="MnasNet-class ONNX file (tau=1056)")
    parser.add_argument("--cache", default=None, help="reuse/persist the feature cache here")
    parser.add_argument("--folds", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--report", default="ptb_report.json")
    args = parser.parse_args()

    data = Path(args.data)
    labels_path = data / "labels.json"
    if not labels_path.exists():
        print(f"no labels.json in {data}; expected {{record_stem: label}}")
        return 2
    label_map = json.loads(labels_path.read_text())

    backend = encoder.load_backend(args.backbone, "mnasnet_class")
    cache_dir = args.cache or (data / "ecgfuse_cache")
    store = FeatureStore.create(cache_dir, "ptb-data-fusion", backend.backend_id,
                                backend.tau, 19, "stacked")
    labels = {}
    skipped = []
    for stem, name in sorted(label_map.items()):
        existing = Path(cache_dir) / f"{stem}.ecgf"
        is_mi = str(name).lower() not in ("normal", "healthy")
        if not existing.exists():
            rec = parse_record(data / f"{stem}.hea", "wfdb")
            rec = canonicalize(rec, rate=500, seconds=10.0)
            if not validate_record(rec).accepted:
                skipped.append(stem)
                continue
            specs = dsp.record_spectrograms(rec)
            feats = encoder.encode_record(backend, specs, "stacked")
            store.put(stem, feats, "acute" if is_mi else "normal")
        labels[stem] = 0 if is_mi else 1
        if len(labels) % 20 == 0:
            print(f"encoded {len(labels)} records")
    if skipped:
        print(f"skipped {len(skipped)} records failing validation: {skipped[:5]}...")

    config = {
        "fusion": "data", "model": "dense-lstm", "n_classes": 2,
        "folds": args.folds, "seed": args.seed,
        "epochs": 30, "patience": 5, "batch_size": 64, "lr": 0.01, "kappa": 16, "nu": 16,
    }
    result = run_experiment(store, labels, config)
    agg = result["aggregate"]
    print(f"\nbinary AUROC (macro over MI/normal): {agg['auroc_macro']:.4f}")
    print(f"accuracy: {agg['accuracy']:.4f}, sensitivity: {agg['sensitivity']:.4f}, "
          f"specificity: {agg['specificity']:.4f}")
    with open(args.report, "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    print(f"report -> {args.report}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
