"""Replacing the kernel solve with a trained operator network.

A small corpus of (beta, k) pairs is generated, a DeepONet is fitted to it, and
the learned kernel is plugged into the feedback loop for a plant the network
never saw. The stability report compares the realized kernel error with the
largest error the closed loop provably tolerates. That tolerance is absolute,
so plants with large kernels (gamma = 3.5 has sup|k| ~ 30) need a relative
accuracy the network does not reach, while gamma = 6 is comfortably inside.

Takes about three minutes on one core:

    python3 demos/learned_gain.py
"""

from backstep_no.dataset import ChebyshevSpec, chebyshev_beta, generate_kernel1d_dataset
from backstep_no.pipeline import held_out_error, recipe, train_on_dataset
from backstep_no.stability import run_gain_experiment

train = generate_kernel1d_dataset(900, seed=1)
test = generate_kernel1d_dataset(100, seed=2)
print(f"{len(train.gammas)} training plants, {len(test.gammas)} held out")

cfg, arch = recipe("kernel1d")
params, hist, gap = train_on_dataset(train, cfg, arch, validation=test)
print(f"gradient check gap at init {gap:.1e}")
print(f"training loss {hist.train[0]:.3f} -> {hist.train[-1]:.4f}")
print(f"held-out relative L2 error {held_out_error(params, test, arch):.3e}")

for gamma in (6.0, 3.5):
    beta = chebyshev_beta(ChebyshevSpec(gamma), 200)
    rep = run_gain_experiment(beta, params)
    b = rep.bounds
    print(f"\nplant gamma = {gamma}: kernel error eps = {b.epsilon:.3e}, tolerated eps* = {b.eps_star:.3e}")
    print(f"guaranteed decay rate c* = {b.c_star:.3f}, measured {rep.decay_rate:.3f}")
    for name, ok in rep.verdicts.items():
        print(f"  {'PASS' if ok else 'FAIL'}  {name}")
