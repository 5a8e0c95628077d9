"""Train variants over seeds on one benchmark and report test macro-F1 and missing-rate drops.

Used to pick the benchmark noise levels and to confirm the acceptance
fixtures before they are enforced, e.g.::

    python scripts/calibrate.py --variants full,no_mie --seeds 0,1,2
    python scripts/calibrate.py --noisy --variants full,no_cmaa,no_mie,no_tfl
    python scripts/calibrate.py --set data.sigma_audio=0.9 --set train.lr=0.001
"""
import argparse
import time
from dataclasses import replace

from affectfuse.config import NOISY_DATA, RunConfig, canonical_text, parse_config
from affectfuse.data import generate_dataset
from affectfuse.harness import VARIANTS, format_mean_std, missing_rate_sweep
from affectfuse.training import evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--noisy", action="store_true", help="start from the noisy benchmark preset")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    ap.add_argument("--variants", default="full,no_mie")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()

    base = RunConfig(data=NOISY_DATA) if args.noisy else RunConfig()
    lines = [ln for ln in canonical_text(base).splitlines()
             if ln.split("=")[0].strip() not in {s.split("=")[0].strip() for s in args.set}]
    cfg = parse_config("\n".join(lines + args.set)).synced()
    variants = [v for v in args.variants.split(",") if v]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if any(v not in VARIANTS for v in variants):
        ap.error(f"variants must come from {VARIANTS}")

    ds = generate_dataset(cfg.data)
    print(f"dataset {ds.fingerprint}: sigma {cfg.data.sigmas()} schedule {cfg.data.noise_schedule}")
    for v in variants:
        f1s = []
        for seed in seeds:
            t0 = time.perf_counter()
            res = train(replace(cfg.model, variant=v), replace(cfg.train, seed=seed), ds.splits["train"],
                        ds.splits["val"])
            res.model.data_fingerprint = ds.fingerprint
            rec = evaluate(res.model, ds.splits["test"])
            sweep = missing_rate_sweep({v: res.model}, ds.splits["test"], cfg.harness.rates, seed=cfg.harness.seed)
            f1s.append(rec.macro_f1)
            accs = " ".join(f"{a:.4f}" for a in sweep.accuracy[v])
            print(f"{v:<8} seed {seed}: best epoch {res.best_epoch:2d} macro-F1 {rec.macro_f1:.4f} "
                  f"sweep {accs} drop {sweep.drop(v):.4f} ({time.perf_counter() - t0:.0f} s)", flush=True)
        print(f"{v:<8} mean macro-F1 {format_mean_std(f1s)}")


if __name__ == "__main__":
    main()
