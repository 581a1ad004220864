"""Validation rank-1 / mAP against lambda on the synthetic set, one row per (seed, lambda)."""

import argparse

from aprnet.config import RunConfig
from aprnet.dataset import synth_dataset
from aprnet.trainer import sweep_lambda


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0, 0.5, 1, 2, 4, 8, 16, 32])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    print("seed,lambda,rank1,mAP,best")
    for seed in args.seeds:
        cfg = RunConfig.load(None, args.set, seed=seed)
        ds = synth_dataset(cfg.synth_config(), cfg.sub_seed("synth"))
        mc = cfg.model_config(len(ds.train_identities()), ds.schema.class_counts, ds.embeddings.dim)
        res = sweep_lambda(mc, cfg.train_config(), ds, args.lambdas)
        for r in res.rows:
            print(f"{seed},{r.lam:g},{r.rank1:.4f},{r.mAP:.4f},{int(r.lam == res.best_lambda)}", flush=True)


if __name__ == "__main__":
    main()
