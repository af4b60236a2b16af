#!/usr/bin/env python3
"""Write a synthetic 12-lead CSV dataset for pipeline experiments.

Each class carries a distinct dominant frequency per lead, so the dataset is
separable end to end. Files land as <out>/synNNNN.csv plus .meta.json
sidecars, ready for `ecgfuse ingest --format csv`.
"""

import argparse

from ecgfuse.synth import make_dataset, write_dataset_csv


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--records", type=int, default=200)
    parser.add_argument("--classes", type=int, default=4, choices=[2, 4])
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    records = make_dataset(args.records, seed=args.seed, n_classes=args.classes)
    paths = write_dataset_csv(records, args.out)
    print(f"wrote {len(paths)} records to {args.out}")


if __name__ == "__main__":
    main()
