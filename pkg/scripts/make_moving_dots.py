"""Write moving-dot fixture datasets to disk.

The integration set is the 3-train + 1-heldout controllability fixture;
the recognition set gives every action class a distinctive motion pattern.
Clips land as .npz + annotation .txt pairs with a JSONL manifest, the same
layout `surgvid prepare` ingests.
"""

import argparse
import pathlib
import sys

from surgvid.synthetic import (
    make_integration_set,
    make_recognition_set,
    write_dataset,
)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--set",
        choices=("integration", "recognition"),
        default="integration",
    )
    parser.add_argument("--per-class", type=int, default=2,
                        help="clips per action (recognition set only)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if args.set == "integration":
        train, heldout = make_integration_set()
        records = train + [heldout]
    else:
        records = make_recognition_set(per_class=args.per_class, seed=args.seed)

    out = pathlib.Path(args.out)
    manifest = write_dataset(out, records)
    for rec in records:
        print(f"  {rec.clip_id}: {rec.frames.shape} {rec.action.value}")
    print(f"wrote {len(records)} clips, manifest {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
