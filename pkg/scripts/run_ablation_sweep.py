"""Train and score the full model and each ablation on one toy corpus.

    python3 scripts/run_ablation_sweep.py --seeds 0 1 2 --iters 600 --out runs/sweep

Writes one report per (variant, seed) plus a summary CSV of medians.
"""

import argparse
import csv
import statistics
import time
from pathlib import Path

from fgt2m.config import load_config
from fgt2m.evaluation import evaluate, fit_evaluator, write_report
from fgt2m.toy_dataset import generate_dataset
from fgt2m.training import split_records, train

VARIANTS = {
    "full": {},
    "lsam_off": {"ablation.lsam_off": "true"},
    "capr1_off": {"ablation.capr1_off": "true"},
    "capr2_off": {"ablation.capr2_off": "true"},
    "shallow_first": {"ablation.block_layer_order": "shallow_first"},
}
SUMMARY_KEYS = ("r_top1", "r_top2", "r_top3", "fid", "fid_noise", "mm_dist", "diversity")


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--iters", type=int, default=600)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--records", type=int, default=2000)
    p.add_argument("--max-test", type=int, default=128)
    p.add_argument("--out", default="runs/sweep")
    args = p.parse_args()

    base = {"data.records": str(args.records), "train.lr": str(args.lr), "train.iters": str(args.iters),
            "eval.max_test": str(args.max_test), "eval.repeats": "1"}
    cfg = load_config(overrides=base)
    records = generate_dataset(cfg.data.records, cfg.data.frames, cfg.data.seed)
    train_recs, test_recs = split_records(records, cfg.data.holdout, cfg.data.seed)
    embedder = fit_evaluator(cfg, train_recs, test_recs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    summary = []
    for name in args.variants:
        reports = []
        for seed in args.seeds:
            start = time.perf_counter()
            vcfg = load_config(overrides={**base, **VARIANTS[name], "train.seed": str(seed), "eval.seed": str(seed)})
            model = train(vcfg, train_recs).model
            rep = evaluate(model, embedder, test_recs, vcfg, multimodal=False)
            write_report(rep, out / f"{name}_seed{seed}.txt")
            reports.append(rep)
            print(f"{name:14s} seed {seed}  r_top1 {rep['r_top1']:.3f}  fid {rep['fid']:.4f}  "
                  f"({time.perf_counter() - start:.0f}s)", flush=True)
        summary.append({"variant": name, **{k: statistics.median(r[k] for r in reports) for k in SUMMARY_KEYS}})

    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", *SUMMARY_KEYS])
        w.writeheader()
        w.writerows(summary)
    for row in summary:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else str(v) for k, v in row.items()))


if __name__ == "__main__":
    main()
