"""Two problems with known answers, solved by the same code paths the full system uses.

1. A two-armed Bernoulli bandit trained with the group-relative clipped update.
2. A 1-D Gaussian-to-Gaussian flow whose optimal velocity is linear in x.

Run:  python demos/02_sanity_problems.py
"""

# %%
import time

import numpy as np

from thinkgen_lab.checks import run_bandit, sample_1d, train_1d_flow, velocity_1d

# %% bandit: arm "left" pays with p=0.8, arm "right" with p=0.2
for seed in range(3):
    run = run_bandit(seed, steps=500)
    trace = ", ".join(f"{p:.2f}" for p in run.probs[:: max(1, len(run.probs) // 6)])
    print(f"seed {seed}: p(left) {trace} ... reached 0.95 after {run.steps_to_target} updates")

# %% flow: x0 ~ N(0, 1) to x1 ~ N(2, 1)
# Along x_t = (1 - t) x0 + t x1 the best velocity is E[x1 - x0 | x_t], which for
# two Gaussians works out to mu + (2t - 1) / ((1 - t)^2 + t^2) * (x - t mu).
mu = 2.0
t0 = time.perf_counter()
gen = train_1d_flow(mu, steps=800)
print(f"\ntrained the 1-D flow in {time.perf_counter() - t0:.0f}s")
xs = np.linspace(-1.0, 4.0, 6)
for t in (0.1, 0.5, 0.9):
    learned = velocity_1d(gen, xs, np.full(xs.shape, t))
    exact = mu + (2 * t - 1) / ((1 - t) ** 2 + t**2) * (xs - t * mu)
    print(f"t={t}: learned {np.round(learned, 2)}")
    print(f"       exact   {np.round(exact, 2)}")
samples = sample_1d(gen, 2000)
print(f"samples: mean {samples.mean():.3f} (target {mu}), std {samples.std():.3f} (target 1)")
