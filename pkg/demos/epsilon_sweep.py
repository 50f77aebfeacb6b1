"""How H at the frozen gamma*, best-gamma H and AUSUC fall with the budget.

A gap between the two H columns means accuracy is recoverable by
re-calibrating: the attack only looks successful at the original gamma*.

    python demos/epsilon_sweep.py
"""

from zslattack import attacks, data, experiment, metrics
from zslattack.model import predict_concepts

cfg = experiment.ExperimentConfig()
ds = data.generate(data.preset(cfg.preset, seed=cfg.seed))
model, _ = experiment.fit(cfg, ds)
te = ds.test()
grid = cfg.grid()


def evaluate(images, gamma=None):
    return metrics.evaluate(predict_concepts(model, images), te.labels, ds.space, grid, gamma)[0]


clean = evaluate(te.images)
print(f"clean  H {clean.h_at_gamma:.1f}  AUSUC {clean.ausuc:.1f}")
print(f"{'eps*255':>7}  {'mode':>9}  {'H@gamma*':>8}  {'best H':>6}  {'AUSUC':>6}")
for eps in (0.5, 1, 2, 4, 8):
    for mode in ("clsA-gzsl", "CBEA"):
        cell = attacks.AttackConfig(mode, eps / 255, 10, seed=1)
        adv, _ = attacks.attack_batch(model, te.images, te.labels, ds.space, cell, clean.gamma_star)
        r = evaluate(adv, clean.gamma_star)
        print(f"{eps:7g}  {mode:>9}  {r.h_at_gamma:8.1f}  {r.h_best:6.1f}  {r.ausuc:6.1f}")
