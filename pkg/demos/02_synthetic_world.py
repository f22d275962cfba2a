"""What the synthetic pre-promotion world looks like.

Generates one world, prints its base rates, the causal effect of the cart
action, and the confounding gap that a naive contrast would report.

Run: python3 demos/02_synthetic_world.py
"""

import numpy as np

from prepromo.synth import generate_dataset, sample_world, true_ate


def main():
    world = sample_world(seed=7)
    print("delayed-head bias:", round(world.b_del, 3),
          "| cart effect tau:", world.tau,
          "| discount effect gamma:", world.gamma)

    daily = generate_dataset(world, 100_000, "daily", seed=1)
    prepromo = generate_dataset(world, 100_000, "prepromo", seed=2)

    def rate(samples, fn):
        return np.mean([fn(s) for s in samples])

    print(f"\ndaily direct-conversion rate:      {rate(daily, lambda s: s.y_all):.4f}")
    print(f"pre-promo direct-conversion rate:  "
          f"{rate(prepromo, lambda s: s.y_all and not s.y_delay):.4f}")
    print(f"pre-promo delayed-conversion rate: {rate(prepromo, lambda s: s.y_delay):.4f}")
    print("(the direct rate collapses before the promotion: users postpone)")

    a = np.array([s.A for s in prepromo])
    y = np.array([s.y_delay for s in prepromo], dtype=float)
    ate = true_ate(prepromo)
    naive = y[a == 1].mean() - y[a == 0].mean()
    print(f"\ntrue effect of the cart action on delayed conversion: {ate:.4f}")
    print(f"naive treated-minus-control contrast:                 {naive:.4f}")
    print(f"confounding inflates the naive estimate by            {naive - ate:+.4f}")

    lengths = [len(s.atc_seq) for s in prepromo]
    print(f"\ncart-history length: mean {np.mean(lengths):.1f}, "
          f"max {max(lengths)}, empty {np.mean([l == 0 for l in lengths]):.1%}")


if __name__ == "__main__":
    main()
