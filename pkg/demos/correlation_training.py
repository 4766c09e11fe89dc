"""Train a small plain CNN three ways and compare feature correlation.

Same initialization, same data order, same sigma: no noise, plain
multiplicative noise (MN) and its non-correlating version (NCMN-1).  After
training, the mean absolute Pearson correlation between post-BN channels
(spatial positions as samples, first layer excluded) is printed per stage.
Takes about 20 seconds on one CPU core.
"""

from ncmn.config import parse_config
from ncmn.diagnostics import correlation_report
from ncmn.experiment import load_dataset
from ncmn.training import build_model, seed_streams, steps_per_epoch, train

cfg = parse_config("""
depth = 5
width = 2
base_width = 8
sigma = 0.35
epochs = 10
samples = 800
test_samples = 300
""")
ds = load_dataset(cfg)
for noise_type in ("none", "mn", "ncmn1"):
    run = cfg.replace(noise_type=noise_type)
    init_rng, train_rng, _ = seed_streams(1)
    model = build_model(run.model_config(), ds.input_shape, init_rng)
    steps = steps_per_epoch(ds.x_train.shape[0], run.batch_size)
    report = train(model, ds, run.epochs, run.optimizer(), run.schedule(steps), train_rng, run.batch_size)
    corr = correlation_report(model, ds.x_test)
    stages = " ".join(f"{g.mean_abs_corr:.3f}" for g in corr.groups)
    print(f"{noise_type:<6} test acc {report.final.eval_acc:.3f}  mean |rho| {corr.overall:.4f}  by stage {stages}")
