"""Scaled-down end-to-end pipeline run to sanity-check training dynamics.

Not part of the package or test suite; run manually during development.
"""
import time

import numpy as np

from fcmh.feature_codec import FeatureCodec
from fcmh.image_codec import (HumanCodec, decode_human_stream,
                              encode_human_stream, prepare_conditioning)
from fcmh.metrics import ms_ssim, psnr, spearman_rho
from fcmh.task import TaskModel, task_accuracy
from fcmh.toydata import generate_dataset
from fcmh.vae import ImageAutoencoder

t00 = time.time()

def tick(msg):
    print(f"[{time.time()-t00:7.1f}s] {msg}", flush=True)

N_TRAIN, N_EVAL = 600, 100
train = generate_dataset(N_TRAIN, seed=0)
evalset = generate_dataset(N_EVAL, seed=1)
tick("data generated")

task = TaskModel(seed=0)
task.train(train, steps=700, batch=16, seed=0,
           log=lambda s, l: tick(f"  head step {s}: loss {l:.4f}"))
tick("task model trained")

train_pyr = task.pyramids(train)
eval_pyr = task.pyramids(evalset)
rep = task_accuracy(task.predict(eval_pyr), evalset)
tick(f"uncompressed accuracy: class {rep.class_acc:.3f} loc {rep.loc_hit:.3f}")

codec = FeatureCodec(seed=0)
hist = codec.train(train_pyr, lambda_p=0.013, steps=900, batch=6, seed=0,
                   log=lambda s, r: tick(f"  vfcn step {s}: mv {r.l_mv:.2f} r {r.l_r:.3f}bpp p {r.l_p:.1f}"))
start = np.mean(hist[40:60]); end = np.mean(hist[-20:])
tick(f"vfcn trained; smoothed l_mv {start:.2f} -> {end:.2f} ({100*(1-end/start):.0f}% drop)")

# rate sweep
svals = [0.4, 0.6, 0.8, 1.0, 1.2]
bpps, accs = [], []
for s in svals:
    tb, preds_in = 0, []
    feats = []
    for p in eval_pyr[:60]:
        stream = codec.encode(p, s)
        tb += stream.total_bits()
        feats.append(codec.decode(stream))
    r = task_accuracy(task.predict(feats), evalset[:60])
    bpps.append(tb / 60 / 4096)
    accs.append(r.combined())
    tick(f"  s={s}: bpp {bpps[-1]:.4f} class {r.class_acc:.3f} loc {r.loc_hit:.3f}")
tick(f"spearman(acc,bpp) = {spearman_rho(np.array(accs), np.array(bpps)):.3f}")

# bit allocation concentration
from fcmh.metrics import bit_allocation_map
from fcmh.toydata import foreground_mask
ratios = []
for im, p in zip(evalset[:40], eval_pyr[:40]):
    stream, info = codec.encode_with_info(p, 0.8)
    amap = bit_allocation_map(info.neg_log2_main)  # 8x8
    mask = foreground_mask(im)  # 64x64
    m8 = mask.reshape(8, 8, 8, 8).mean(axis=(1, 3)) > 0.15
    if m8.sum() == 0 or (~m8).sum() == 0:
        continue
    ratios.append(amap[m8].mean() / max(amap[~m8].mean(), 1e-9))
ratios = np.array(ratios)
tick(f"bit alloc fg/bg ratio: mean {ratios.mean():.2f}, frac>=1.5: {(ratios>=1.5).mean():.2f}")

vae = ImageAutoencoder(seed=0)
vae.train(train, steps=900, batch=8, seed=0,
          log=lambda s, r, k: tick(f"  vae step {s}: rec {r:.5f} kl {k:.3f}"))
px = np.stack([im.pixels for im in evalset[:40]])
rec = vae.decode_latents(vae.encode_images(px))
psnrs = [psnr(a, b) for a, b in zip(px, rec)]
tick(f"vae psnr: mean {np.mean(psnrs):.2f} dB, min {np.min(psnrs):.2f}")

vae.freeze()
human = HumanCodec(seed=0)
hist = human.train(train, train_pyr, vae, codec, lambda_a=2.0, lambda_rs=1.0,
                   steps=900, batch=8, seed=0,
                   log=lambda s, r: tick(f"  hvcn step {s}: s {r.l_s:.4f} a {r.l_a:.4f} rs {r.l_rs:.4f}"))
start = np.mean(hist[:50]); end = np.mean(hist[-50:])
tick(f"hvcn trained; l_s {start:.3f} -> {end:.3f} ({100*(1-end/start):.0f}% drop)")

# sampling step trend
ks = [5, 10, 20, 50]
means = []
for k in ks:
    vals = []
    for i, (im, p) in enumerate(zip(evalset[:12], eval_pyr[:12])):
        stream = encode_human_stream(im, p, human, vae, codec, s=0.8)
        img = decode_human_stream(stream, human, vae, codec, k=k, seed=100 + i)
        vals.append(ms_ssim(img, im.pixels))
    means.append(np.mean(vals))
    tick(f"  K={k}: ms-ssim {means[-1]:.4f}")
tick(f"msssim trend: {['%.4f' % m for m in means]}")

# seed stability
for s in (0.6, 1.0):
    per_seed = []
    for seed in range(8):
        vals = []
        for i, (im, p) in enumerate(zip(evalset[:8], eval_pyr[:8])):
            stream = encode_human_stream(im, p, human, vae, codec, s=s)
            img = decode_human_stream(stream, human, vae, codec, k=10, seed=7000 + seed)
            vals.append(ms_ssim(img, im.pixels))
        per_seed.append(np.mean(vals))
    tick(f"seed stability s={s}: std {np.std(per_seed):.5f}")

tick("done")
