"""How fast each stage's schedule destroys the signal.

Prints the signal fraction sqrt(alpha_bar_t) at a few steps for the four
stage schedules and writes a plot to demos/out/schedules.png.
"""
from pathlib import Path

import matplotlib
import numpy as np

from diffspeech.schedules import make_linear_schedule

STAGES = {"duration": 5, "wave": 50, "semantic": 200, "acoustic": 200}

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

fig, ax = plt.subplots(figsize=(6, 3.5))
for name, T in STAGES.items():
    s = make_linear_schedule(1e-4, 0.05, T)
    signal = np.sqrt(s.alpha_bars)
    print(f"{name:>9}  T={T:<4} signal at t=1: {signal[0]:.4f}  t=T/2: {signal[T // 2 - 1]:.4f}  t=T: {signal[-1]:.4f}")
    ax.plot(np.arange(1, T + 1) / T, signal, label=f"{name} (T={T})")
ax.set_xlabel("t / T")
ax.set_ylabel("sqrt(alpha_bar)")
ax.legend()
fig.tight_layout()
fig.savefig(out / "schedules.png")
print("wrote", out / "schedules.png")
