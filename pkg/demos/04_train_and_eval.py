# %% [markdown]
# Training, evaluation and prediction grids
# -----------------------------------------
# A short run of the whole loop: pretraining (discriminator updates, then
# a joint reconstruction update), then the three-phase main loop
# (discriminator, motion guider, generator).  The budget here is tiny so
# the script finishes in a minute or two; pass --full for the desk-scale
# budget (300 + 1500 iterations, roughly 40 minutes on one core).

# %%
import argparse
import tempfile
from pathlib import Path

from lmvp import cli
from lmvp.data import DataConfig, generate_bouncing
from lmvp.training import TrainConfig, Trainer, evaluate

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true", help="desk-scale budget")
ap.add_argument("--mode", default="full", choices=["full", "ablation"])
args = ap.parse_args()

if args.full:
    n_train, n_test, cfg = 256, 64, TrainConfig(mode=args.mode)
else:
    n_train, n_test, cfg = 32, 16, TrainConfig(pretrain_iters=20, main_iters=10, mode=args.mode)

train = generate_bouncing(DataConfig(N=n_train), stream=0)
test = generate_bouncing(DataConfig(N=n_test), stream=1)

# %%
tr = Trainer(cfg, train)


def progress(trainer, r):
    if r.iteration % 10 == 0 or trainer.iteration == cfg.total_iters:
        print("  ", ",".join(r.row()))


print("iter,loss_dis,loss_recons,loss_teacher,loss_gen,loss_guider")
tr.run(callback=progress)

# %% [markdown]
# Per-step metrics against the copy-last-frame baseline.  The baseline is
# worst on BCE because a moved binary sprite is confidently wrong on every
# pixel it used to cover.

# %%
table = evaluate(test, tr.params, cfg)
print("step   bce     ssim  | baseline bce  ssim")
for row in table.rows():
    print(f"{row[0]:>4} {row[1]:7.4f} {row[4]:7.4f} | {row[5]:10.4f} {row[8]:7.4f}")
agg, base = table.aggregate(), table.aggregate("baseline")
print(f"mean  {agg.bce:7.4f} {agg.ssim:7.4f} | {base.bce:10.4f} {base.ssim:7.4f}")

# %% [markdown]
# A grid image per video: ground truth on top, the model in the middle and
# the last-frame copy at the bottom.

# %%
from lmvp.training import predict

preds = predict(test.videos[:2], tr.params, cfg)
out = Path(tempfile.mkdtemp())
for i in range(2):
    cli.write_pgm(out / f"grid_{i}.pgm", cli.grid_image(test.videos[i], preds[i], cfg.T0))
print("grids written to", out)
