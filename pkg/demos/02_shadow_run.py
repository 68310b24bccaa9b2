# A small federated run: the backdoor takes over an undefended model, and the
# backbone/shadow split keeps it out of target-label predictions.
#
# Run:  python3 demos/02_shadow_run.py        (a few minutes on one core)

from shadowfl import ExperimentConfig, run_experiment

world = dict(n_clients=200, clients_per_round=50, n_test=1000, rounds=150, alpha=0.2, seed=3)

for defense in ("none", "shadow"):
    res = run_experiment(ExperimentConfig(defense=defense, **world))
    s = res.summary
    print(f"{defense:7s} final MTA {s['final_mta']:.3f}   final ASR {s['final_asr']:.3f}")
    if defense == "shadow":
        # the shadow model is retrained from scratch when the target-label
        # accuracy jumps, and frozen once its own accuracy stalls
        print("  shadow early-stopped at rounds", s["early_stop_rounds"])
        recs = res.records
        first = next((r.round for r in recs if r.filter_learned), None)
        print("  filter learned at round", first)
        print("  clients dropped right after:", [r.filtered_count for r in recs[first:first + 5]])

# Every round is logged; rounds.csv and curves.csv hold the same numbers
# when the run is given an output directory:
#     run_experiment(cfg, "out/demo")
