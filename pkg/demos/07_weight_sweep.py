"""Sweep the two loss weights at reduced scale.

The additive-conversion weight and the counterfactual weight both default to
fixed values; this grid shows how sensitive the delayed ranking is to them.

Run: python3 demos/07_weight_sweep.py   (slow: 9 fine-tuning runs)
"""

from dataclasses import replace

from prepromo.experiment import make_config, run_experiment


def main():
    rows = []
    for lambda_all in (0.1, 0.5, 1.0):
        for lambda_cm in (0.01, 0.1, 1.0):
            cfg = make_config("desk")
            cfg.dataset = replace(cfg.dataset, n_daily=20_000, n_prepromo=50_000)
            cfg.model = replace(cfg.model, lambda_all=lambda_all,
                                lambda_cm=lambda_cm)
            cfg.variants = ("cmdcm",)
            cfg.seeds = (1,)
            cfg.out_dir = f"runs/sweep/l{lambda_all}_c{lambda_cm}"
            result = run_experiment(cfg)
            entry = result.summary["cmdcm"]
            rows.append((lambda_all, lambda_cm,
                         entry["auc_delay"]["mean"], entry["nll_delay"]["mean"]))
            print(f"lambda_all={lambda_all:<4} lambda_cm={lambda_cm:<5} "
                  f"auc_delay={rows[-1][2]:.4f} nll_delay={rows[-1][3]:.4f}")

    best = max(rows, key=lambda r: r[2])
    print(f"\nbest delayed ranking at lambda_all={best[0]}, lambda_cm={best[1]}")


if __name__ == "__main__":
    main()
