"""
Desk-scale training and ablations
=================================

Generates 200 training and 20 test samples (64x64, four coils, five delays,
four-fold undersampling), trains the weights and priors of the unrolled
network, and compares test T1 errors with the untrained network, the two-step
baselines and three ablations. Training compares T1 = 1/R1 directly on the R1
channel: with a plain parameter MSE the training loss falls while the test T1
error does not. Takes roughly an hour on one CPU core; set ``QPINQI_QUICK=1``
for a short smoke run.
"""

import json
import os
import time
from pathlib import Path

import numpy as np

from qpinqi.evaluation import baselines, score_t1
from qpinqi.pinqi import PinqiConfig, init_state, pinqi_reconstruct
from qpinqi.synth import Dataset, PhantomSpec, SimSpec, write_dataset
from qpinqi.train import TrainConfig, train_loop

quick = os.environ.get("QPINQI_QUICK") == "1"
root = Path(os.environ.get("QPINQI_WORKDIR", "desk_run"))
n_train, n_test = (8, 4) if quick else (200, 20)
steps = 10 if quick else 100

phantom, sim = PhantomSpec(size=64), SimSpec(n_coils=4, accel=4)
for name, n, seed in (("train", n_train, 11), ("test", n_test, 12)):
    if not (root / name / "manifest.json").is_file():
        write_dataset(root / name, n, seed, phantom, sim)
train, test = Dataset(root / "train"), Dataset(root / "test")


def test_nrmse(state, cfg):
    scores = []
    for i in range(len(test)):
        rec = test[i]
        trace = pinqi_reconstruct(rec.k, rec.acquisition(), rec.model(), state, cfg)
        scores.append(score_t1(trace.p_final, rec.p_true, rec.weight_mask).nrmse)
    return float(np.mean(scores))


results = {}
full = PinqiConfig(loss_weighting="t1exact")
results["untrained"] = test_nrmse(init_state(full, 5), full)

base = {"zerofill": [], "cgsense": []}
for i in range(len(test)):
    rec = test[i]
    for name, (p, _) in baselines(rec.k, rec.acquisition(), rec.model()).items():
        base[name].append(score_t1(p, rec.p_true, rec.weight_mask).nrmse)
results.update({name: float(np.mean(v)) for name, v in base.items()})

tcfg = TrainConfig(steps=steps, batch=4)
for mode in ("full", "d", "h", "i"):
    cfg = PinqiConfig.ablation(mode, loss_weighting="t1exact")
    t0 = time.perf_counter()
    state, log = train_loop(train, tcfg, cfg, out=root / f"ckpt_{mode}")
    minutes = (time.perf_counter() - t0) / 60
    results[mode] = test_nrmse(state, cfg)
    print(f"mode {mode}: trained {steps} steps in {minutes:.1f} min, test nRMSE {results[mode]:.4f}")

print(json.dumps(results, indent=2))
(root / "results.json").write_text(json.dumps(results, indent=2))
