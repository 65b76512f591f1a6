"""Train on the desk-scale synthetic corpus and compare configurations.

Takes roughly half a minute on one core. Run with
``python demos/04_desk_training.py``.
"""

from dataclasses import replace

from perspective_retrieval import DESK_CORPUS, TrainConfig, evaluate, gen_corpus, train
from perspective_retrieval.trainer import model_from_checkpoint

corpus = gen_corpus(0, **DESK_CORPUS)
cfg = TrainConfig()
print(f"corpus: {corpus.n_images} images, K={corpus.K}, token width {corpus.token_width}")

ckpt = train(corpus, cfg)
h = ckpt.history
print("epoch  running loss  train objective  val mR")
for e in range(0, cfg.epochs, 5):
    print(f"{int(h['epoch'][e]):5d}  {h['loss_total'][e]:12.4f}  {h['train_loss'][e]:15.4f}  {h['val_mR'][e]:6.2f}")
print(f"best val mR {max(h['val_mR']):.2f} at epoch {ckpt.best_epoch}")

# The same recipe without the multi-perspective branch is a plain
# bi-encoder with adapters.
plain = replace(cfg, mpr_on=False, use_mpc=False, use_mpt=False)
for name, c in (("full model", cfg), ("plain bi-encoder", plain)):
    model = model_from_checkpoint(train(corpus, c))
    print(f"{name:17s} test mR {evaluate(model, corpus, 'test', c).mr:6.2f}")
