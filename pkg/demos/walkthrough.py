"""Generate mini-awa2, train, and attack the test split once per mode.

    python demos/walkthrough.py
"""

from zslattack import attacks, data, experiment, metrics
from zslattack.model import predict_concepts

cfg = experiment.ExperimentConfig()
ds = data.generate(data.preset(cfg.preset, seed=cfg.seed))
print(experiment.format_stats(ds.stats(), cfg.preset), end="\n\n")

model, trace = experiment.fit(cfg, ds)
print(f"trained {len(trace)} epochs, final loss {trace[-1].total:.4f}")

te = ds.test()
grid = cfg.grid()
clean, _ = metrics.evaluate(predict_concepts(model, te.images), te.labels, ds.space, grid)
gamma = clean.gamma_star
print(f"clean: T1 {clean.t1_zsl:.1f}  H {clean.h_at_gamma:.1f} at gamma* {gamma:.3f}  AUSUC {clean.ausuc:.1f}\n")

print(f"{'attack':>18}  {'T1':>6}  {'H@gamma*':>8}  {'best H':>6}  {'AUSUC':>6}  {'MSE_u':>6}")
seed = experiment.stream_seed(cfg.seed, "attack")
for mode in attacks.MODES:
    cell = attacks.AttackConfig(mode, 8 / 255, 10, seed=seed)
    adv, _ = attacks.attack_batch(model, te.images, te.labels, ds.space, cell, gamma)
    r, _ = metrics.evaluate(predict_concepts(model, adv), te.labels, ds.space, grid, gamma)
    print(f"{cell.tag:>18}  {r.t1_zsl:6.1f}  {r.h_at_gamma:8.1f}  {r.h_best:6.1f}  {r.ausuc:6.1f}  {r.mse_u:6.2f}")
