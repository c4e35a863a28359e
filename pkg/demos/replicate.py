"""Train one short configuration twice and compare the run logs.

Then change a single seed and report where the two runs part ways.
Run with ``python demos/replicate.py``; it takes a few seconds.
"""

from detrl.determinism import compare_runs
from detrl.dqn import AgentRunConfig, Hyperparams, train_run
from detrl.reference import load_start_suite
from detrl.rng import SeedSpec

HP = Hyperparams(total_steps=3000, eval_interval=1000, learn_start=200)


def main():
    suite = load_start_suite()
    cfg = AgentRunConfig(hp=HP)
    a, b = train_run(cfg, suite), train_run(cfg, suite)
    print("same config:     ", compare_runs(a, b))
    for field in ("init_seed", "minibatch_seed", "exploration_seed"):
        other = train_run(AgentRunConfig(seeds=SeedSpec().replace(**{field: 99}), hp=HP), suite)
        print(f"{field:<17}", compare_runs(a, other))
        print(f"{'':<17} final means {a.evaluations[-1].mean:.2f} vs {other.evaluations[-1].mean:.2f}")


if __name__ == "__main__":
    main()
