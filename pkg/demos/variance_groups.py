"""A scaled-down version of the six-group variance study.

Each group varies one source of randomness across three runs of 10,000
steps.  Prints the summary table and an F-test on final scores.
Takes a few minutes on one CPU; pass a worker count to parallelize.

At this length the compute group usually shows identical scores even
though its weight hashes differ from the first checkpoint on: the tiny
rounding differences have not yet changed any greedy action.
"""

import sys

from detrl.dqn import Hyperparams
from detrl.reference import load_start_suite, load_sticky_suite
from detrl.sensitivity import GROUP_NAMES, GroupSpec, run_group, summary_table, variance_test

HP = Hyperparams(total_steps=10_000, eval_interval=2_000, eps_anneal_steps=5_000)


def main(parallelism=1):
    reports, finals = {}, {}
    for name in GROUP_NAMES:
        suite = load_sticky_suite() if name == "environment" else load_start_suite()
        logs, reports[name] = run_group(GroupSpec.standard(name, n_runs=3, hp=HP), suite, parallelism)
        finals[name] = [lg.evaluations[-1].mean for lg in logs]
        print(f"{name}: done", file=sys.stderr)
    print(summary_table(list(reports.values())))
    res = variance_test(finals["initialization"], finals["minibatch"])
    print(f"initialization vs minibatch: F={res.statistic:.3f} p={res.p_value:.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1)
