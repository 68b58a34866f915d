# Fit the synthetic three-object scene and report image and feature metrics.
# usage: python toy_training.py [iterations]   (the full preset uses 2000)
import sys
import time

from anchorsplat import config, trainer

cfg = config.toy()
cfg.train.iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg.train.eval_every = 0

data = trainer.load_data(cfg)
print(len(data.cameras), "views,", len(data.points), "points, feature models:",
      {t: f.data.shape[-1] for t, f in data.features[0].items()})


def progress(it, res):
    if it % 100 == 0:
        row = res.log_rows[-1]
        print(f"iter {it}: loss {row['loss']:.4f} psnr {row['psnr']:.2f} anchors {row['anchors']}")


t0 = time.time()
res = trainer.train(cfg, data, progress=progress)
print(f"trained in {time.time() - t0:.0f}s")

ev = trainer.evaluate(res.model, data)
print(f"train PSNR {ev['train_psnr']:.2f}  held-out PSNR {ev['test_psnr']:.2f}  "
      f"mean cosine distance {ev['mean_cos']:.4f}")
for row in ev["views"]:
    print(f"  view {row['view']} ({row['split']}): psnr {row['psnr']:.2f}")
