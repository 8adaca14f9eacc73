"""Calibration sweep for the desk-scale training acceptance checks."""
import time

import numpy as np

from srquant.autodiff import Tensor
from srquant.data import SyntheticPatches
from srquant.metrics import psnr
from srquant.mismatch import collect_mismatch, select_offset_layers
from srquant.model import SRModelConfig, pretrain_teacher
from srquant.training import LossConfig, TrainSchedule, train


def eval_psnr(model, dataset, border):
    scores = []
    for pair in dataset.batches(0, 1):
        out = model.forward(pair.lr)
        sr = np.clip(out.sr.data[0], 0, 1) * 255.0
        hr = pair.hr.data[0] * 255.0
        scores.append(psnr(sr, hr, border))
    return float(np.mean(scores))


def mean_tap_sigma(model, dataset):
    batch = next(dataset.batches(0, 8))
    out = model.forward(batch.lr)
    return float(np.mean([t.data.std() for t in out.taps]))


def main():
    cfg = SRModelConfig(num_blocks=2, channels=8, scale=4)
    data = SyntheticPatches(n=64, scale=4, patch_size=48, seed=100)
    eval_data = SyntheticPatches(n=16, scale=4, patch_size=48, seed=100 + 7919)
    t0 = time.time()
    teacher, losses = pretrain_teacher(cfg, data, steps=2000, lr=1e-3, seed=100)
    print(f"teacher: {time.time()-t0:.0f}s loss {losses[0]:.4f}->{losses[-1]:.4f} "
          f"psnr={eval_psnr(teacher, eval_data, 4):.3f}", flush=True)

    batch = next(data.batches(0, 8))
    plan = select_offset_layers(collect_mismatch(teacher, batch.lr), 0.3)
    print("plan:", plan, flush=True)

    sched = TrainSchedule(epochs=60, lr0=1e-4, halve_every=20, batch_size=8)

    for lam_v in (1e-4, 1e-2, 1e-1):
        print(f"=== lambda_v = {lam_v}", flush=True)
        for seed in (0, 1, 2):
            tdata = SyntheticPatches(n=64, scale=4, patch_size=48, seed=seed)
            runs = {}
            variants = {
                "odm":   (LossConfig(lambda_v=lam_v), plan),
                "pams":  (LossConfig(lambda_v=lam_v, cooperative=False, variance_reg=False), None),
                "novar": (LossConfig(lambda_v=lam_v, variance_reg=False), plan),
                "nocoop": (LossConfig(lambda_v=lam_v, cooperative=False), plan),
            }
            t0 = time.time()
            for name, (lc, pl) in variants.items():
                res = train(teacher, tdata, sched, lc, plan=pl, seed=seed, bits=2)
                runs[name] = res
            line = f"seed {seed} ({time.time()-t0:.0f}s): "
            for name, res in runs.items():
                p = eval_psnr(res.model, eval_data, 4)
                sig = mean_tap_sigma(res.model, tdata)
                lr_final = res.telemetry[-1].loss_r
                line += f"{name}: psnr={p:.3f} sigma={sig:.4f} lossr={lr_final:.4f} | "
            print(line, flush=True)


if __name__ == "__main__":
    main()
