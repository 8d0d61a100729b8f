"""All eight training methods plus the zero-shot reference on one toy
dataset, with the superiority count against the plain baseline.
"""

from fedprompt import rngs
from fedprompt.data import SyntheticSpec, generate_synthetic_dataset
from fedprompt.evaluation import ExperimentPlan, ScenarioSpec, run_scenario, superiority_indicator
from fedprompt.federation import FederationConfig
from fedprompt.vlm import ModelConfig

datasets = {
    f"synthetic#{k}": generate_synthetic_dataset(
        SyntheticSpec(classes=6, feature_dim=32, noise_sigma=0.15, samples_per_class=60,
                      prototype_seed=k),
        rngs.derive_rng(k, rngs.DATA),
    )
    for k in range(2)
}

plan = ExperimentPlan(
    model=ModelConfig(m=1, L=4, d_token=16, d_feature=32, d_image=32,
                      encoder="attention_block", token_scale=0.05),
    federation=FederationConfig(protocol="standard", num_clients=5, rounds=10),
    alpha=0.3,
    per_class_subsample=40,
)

methods = ["zsclip", "promptfl", "kgcoop", "src", "prograd", "proda", "cocoop", "plot", "fedotp"]
table, _curves = run_scenario(ScenarioSpec(kind="global"), methods, seeds=[0, 1],
                              datasets=datasets, plan=plan)

names = sorted(datasets)
print(f"{'method':10s}  " + "  ".join(f"{n:>12s}" for n in names) + "     #")
baseline = {n: table.cell("global", "promptfl", n, "alpha_g")[0] for n in names}
for method in methods:
    cells = []
    means = {}
    for n in names:
        mean, std, _ = table.cell("global", method, n, "alpha_g")
        means[n] = mean
        cells.append(f"{mean:6.1f}±{std:4.1f}")
    marker = "-" if method in ("promptfl", "zsclip") else str(
        superiority_indicator(means, baseline))
    print(f"{method:10s}  " + "  ".join(f"{c:>12s}" for c in cells) + f"     {marker}")

print("\nthe # column counts datasets where a method's mean beats the baseline")
