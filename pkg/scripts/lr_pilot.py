"""Single-seed learning-rate pilot: loss curve plus retrieval and FID at the end.

    python3 scripts/lr_pilot.py --lr 5e-5 1e-4 1e-3 --iters 1000
"""

import argparse

from fgt2m.config import load_config
from fgt2m.evaluation import evaluate, fit_evaluator
from fgt2m.toy_dataset import generate_dataset
from fgt2m.training import split_records, train


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--lr", nargs="+", type=float, default=[5e-5, 1e-3])
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-test", type=int, default=128)
    args = p.parse_args()

    base = {"train.iters": str(args.iters), "train.seed": str(args.seed), "eval.max_test": str(args.max_test),
            "eval.repeats": "1"}
    cfg = load_config(overrides=base)
    records = generate_dataset(cfg.data.records, cfg.data.frames, cfg.data.seed)
    train_recs, test_recs = split_records(records, cfg.data.holdout, cfg.data.seed)
    embedder = fit_evaluator(cfg, train_recs, test_recs)
    for lr in args.lr:
        vcfg = load_config(overrides={**base, "train.lr": str(lr)})
        result = train(vcfg, train_recs)
        rep = evaluate(result.model, embedder, test_recs, vcfg, multimodal=False)
        curve = " ".join(f"{row['loss']:.3f}" for row in result.history)
        print(f"lr {lr:g}: loss {curve}")
        print(f"  r_top1 {rep['r_top1']:.3f}  r_top3 {rep['r_top3']:.3f}  fid {rep['fid']:.4f}  "
              f"fid_noise {rep['fid_noise']:.4f}  ({result.seconds:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
