"""mAP and rank-1 as synthetic distractors are appended to the test gallery.

Trains an APR model on the synthetic set (or uses raw features with --raw) and
scores nested galleries, so every curve is non-increasing by construction of
the protocol rather than by luck of the draw.
"""

import argparse
import time
from dataclasses import replace

from aprnet.config import RunConfig
from aprnet.dataset import synth_dataset
from aprnet.evaluation import distractor_scaling, scaling_csv
from aprnet.trainer import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sizes", type=int, nargs="+", default=[0, 1000, 5000, 20000])
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--raw", action="store_true", help="score raw features instead of a trained model")
    args = ap.parse_args()
    cfg = RunConfig.load(None, [], seed=args.seed)
    ds = synth_dataset(replace(cfg.synth_config(), num_distractors=max(args.sizes)), cfg.sub_seed("synth"))
    params = None
    if not args.raw:
        mc = cfg.model_config(len(ds.train_identities()), ds.schema.class_counts, ds.embeddings.dim)
        params, _ = train(mc, cfg.train_config(), ds)
    start = time.perf_counter()
    rows = distractor_scaling(ds, args.sizes, params=params, seed=cfg.sub_seed("distractors"), threads=args.threads)
    print(scaling_csv(rows), end="")
    print(f"# scored in {time.perf_counter() - start:.1f} s")


if __name__ == "__main__":
    main()
